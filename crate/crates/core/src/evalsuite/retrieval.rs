use super::unit_rows;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{shape_err, Tensor};

pub const RETRIEVAL_HEADER: &str = "direction,recall_at_1,pairs";

/// Recall@1 in both directions over aligned pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recall {
    pub i2t: f64,
    pub t2i: f64,
    pub pairs: usize,
}

impl Recall {
    pub fn to_csv(&self) -> String {
        format!("{RETRIEVAL_HEADER}\ni2t,{},{}\nt2i,{},{}\n", self.i2t, self.pairs, self.t2i, self.pairs)
    }
}

/// Row `i` of `images` pairs with row `i` of `texts`. A query counts as a
/// hit only if its partner scores strictly above every other candidate.
pub fn retrieval_eval<T: Scalar>(images: &Tensor<T>, texts: &Tensor<T>) -> Result<Recall> {
    if images.ndim() != 2 || texts.ndim() != 2 {
        return shape_err(format!(
            "retrieval takes [K, D] embeddings, got {:?} and {:?}",
            images.shape(),
            texts.shape()
        ));
    }
    let k = images.shape()[0];
    if texts.shape()[0] != k {
        return Err(Error::CountMismatch(k, texts.shape()[0]));
    }
    if images.shape()[1] != texts.shape()[1] {
        return shape_err(format!("embedding widths {} and {} differ", images.shape()[1], texts.shape()[1]));
    }
    if k == 0 {
        return Err(Error::Config("retrieval needs at least one pair".into()));
    }
    let (im, tx) = (unit_rows(images), unit_rows(texts));
    let sim: Vec<Vec<f64>> =
        im.iter().map(|a| tx.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect()).collect();
    let hit = |row: &dyn Fn(usize) -> f64, i: usize| (0..k).all(|j| j == i || row(j) < row(i));
    let i2t = (0..k).filter(|&i| hit(&|j| sim[i][j], i)).count();
    let t2i = (0..k).filter(|&i| hit(&|j| sim[j][i], i)).count();
    Ok(Recall { i2t: i2t as f64 / k as f64, t2i: t2i as f64 / k as f64, pairs: k })
}
