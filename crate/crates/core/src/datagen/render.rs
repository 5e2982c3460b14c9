//! Flat-color rasterizer for 2x2 grid scenes, and its inverse.

use super::{Color, Object, Scene, Shape, GRID};
use crate::tensor::Tensor;

/// Whether the pixel centre at cell-relative `(u, v)` in `[0, 1)^2` is inside
/// `shape`. `v` grows downwards.
fn covers(shape: Shape, u: f32, v: f32) -> bool {
    let (du, dv) = ((u - 0.5).abs(), (v - 0.5).abs());
    match shape {
        Shape::Circle => du * du + dv * dv <= 0.35 * 0.35,
        Shape::Square => du <= 0.3 && dv <= 0.3,
        Shape::Triangle => (0.2..=0.8).contains(&v) && du <= 0.35 * (v - 0.2) / 0.6,
        Shape::Cross => (du <= 0.1 && dv <= 0.38) || (dv <= 0.1 && du <= 0.38),
    }
}

fn paint_cell(data: &mut [f32], res: usize, cell: usize, shape: Shape, color: Color) {
    let side = res / GRID;
    let (row, col) = (cell / GRID, cell % GRID);
    let rgb = color.rgb();
    for y in 0..side {
        for x in 0..side {
            let u = (x as f32 + 0.5) / side as f32;
            let v = (y as f32 + 0.5) / side as f32;
            if covers(shape, u, v) {
                let (py, px) = (row * side + y, col * side + x);
                for (c, &val) in rgb.iter().enumerate() {
                    data[(c * res + py) * res + px] = val;
                }
            }
        }
    }
}

/// Renders `scene` as a `[3, res, res]` image in `[0, 1]` on a black
/// background.
pub fn render(scene: &Scene, res: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; 3 * res * res];
    for o in scene.objects() {
        paint_cell(&mut data, res, o.cell as usize, o.shape, o.color);
    }
    Tensor::new(vec![3, res, res], data).expect("image shape")
}

/// Whether every shape covers at least one pixel and no two shapes share a
/// mask at `res`, so that [`inverse_render`] is exact.
pub fn resolution_is_decodable(res: usize) -> bool {
    if res == 0 || !res.is_multiple_of(GRID) {
        return false;
    }
    let masks: Vec<Vec<f32>> = Shape::ALL
        .iter()
        .map(|&s| {
            let mut m = vec![0.0f32; 3 * res * res];
            paint_cell(&mut m, res, 0, s, Color::ALL[0]);
            m
        })
        .collect();
    masks.iter().all(|m| m.iter().any(|&v| v > 0.0))
        && masks.iter().enumerate().all(|(i, a)| masks[i + 1..].iter().all(|b| a != b))
}

/// Recovers the scene by matching every cell against the 16 object templates
/// and the empty cell. Exact on noise-free renders.
pub fn inverse_render(image: &Tensor<f32>) -> Option<Scene> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] || !shape[1].is_multiple_of(GRID) {
        return None;
    }
    let res = shape[1];
    let side = res / GRID;
    let mut objects = Vec::new();
    for cell in 0..GRID * GRID {
        let (row, col) = (cell / GRID, cell % GRID);
        let sse = |tpl: &[f32]| -> f32 {
            let mut s = 0.0;
            for c in 0..3 {
                for y in 0..side {
                    for x in 0..side {
                        let i = (c * res + row * side + y) * res + col * side + x;
                        let d = image.data()[i] - tpl[i];
                        s += d * d;
                    }
                }
            }
            s
        };
        let empty = vec![0.0f32; 3 * res * res];
        let mut best = (sse(&empty), None);
        for &s in &Shape::ALL {
            for &c in &Color::ALL {
                let mut tpl = vec![0.0f32; 3 * res * res];
                paint_cell(&mut tpl, res, cell, s, c);
                let e = sse(&tpl);
                if e < best.0 {
                    best = (e, Some((s, c)));
                }
            }
        }
        if let Some((s, c)) = best.1 {
            objects.push(Object { shape: s, color: c, cell: cell as u8 });
        }
    }
    Scene::new(objects).ok()
}
