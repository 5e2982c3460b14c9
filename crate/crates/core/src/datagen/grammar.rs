//! Caption grammar and the scene-semantics checker.
//!
//! ```text
//! caption  := object | object relation object | object relation object "and" object
//! object   := color shape
//! relation := "left of" | "right of" | "above" | "below"
//! ```

use std::fmt;

use super::{Color, Object, Scene, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn words(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
        }
    }

    /// Whether `a` stands in this relation to `b` on the grid.
    pub fn holds(self, a: &Object, b: &Object) -> bool {
        let (ar, ac) = a.row_col();
        let (br, bc) = b.row_col();
        match self {
            Relation::LeftOf => ac < bc,
            Relation::RightOf => ac > bc,
            Relation::Above => ar < br,
            Relation::Below => ar > br,
        }
    }

    /// The phrase used when captioning `a` relative to `b`: horizontal when
    /// the columns differ, vertical otherwise.
    pub fn between(a: &Object, b: &Object) -> Self {
        let (ar, ac) = a.row_col();
        let (br, bc) = b.row_col();
        if ac != bc {
            if ac < bc {
                Relation::LeftOf
            } else {
                Relation::RightOf
            }
        } else if ar < br {
            Relation::Above
        } else {
            Relation::Below
        }
    }
}

/// Color and shape without a position.
pub type Attrs = (Color, Shape);

/// Parsed caption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    pub subject: Attrs,
    pub relation: Option<(Relation, Attrs)>,
    pub extra: Option<Attrs>,
}

impl Caption {
    pub fn of_scene(scene: &Scene) -> Self {
        let objs = scene.objects();
        let attrs = |o: &Object| (o.color, o.shape);
        Caption {
            subject: attrs(&objs[0]),
            relation: objs.get(1).map(|b| (Relation::between(&objs[0], b), attrs(b))),
            extra: objs.get(2).map(attrs),
        }
    }

    pub fn mentioned(&self) -> Vec<Attrs> {
        let mut v = vec![self.subject];
        v.extend(self.relation.map(|(_, b)| b));
        v.extend(self.extra);
        v
    }

    pub fn parse(text: &str) -> Option<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let object = |i: usize| -> Option<Attrs> {
            Some((Color::from_word(words.get(i)?)?, Shape::from_word(words.get(i + 1)?)?))
        };
        let subject = object(0)?;
        if words.len() == 2 {
            return Some(Caption { subject, relation: None, extra: None });
        }
        let (rel, next) = match (words.get(2).copied(), words.get(3).copied()) {
            (Some("left"), Some("of")) => (Relation::LeftOf, 4),
            (Some("right"), Some("of")) => (Relation::RightOf, 4),
            (Some("above"), _) => (Relation::Above, 3),
            (Some("below"), _) => (Relation::Below, 3),
            _ => return None,
        };
        let other = object(next)?;
        let rest = &words[next + 2..];
        let extra = match rest {
            [] => None,
            ["and", _, _] => Some(object(next + 3)?),
            _ => return None,
        };
        Some(Caption { subject, relation: Some((rel, other)), extra })
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let obj = |(c, s): Attrs| format!("{} {}", c.word(), s.word());
        write!(f, "{}", obj(self.subject))?;
        if let Some((rel, b)) = self.relation {
            write!(f, " {} {}", rel.words(), obj(b))?;
        }
        if let Some(c) = self.extra {
            write!(f, " and {}", obj(c))?;
        }
        Ok(())
    }
}

/// Deterministic caption for a scene.
pub fn caption_of(scene: &Scene) -> String {
    Caption::of_scene(scene).to_string()
}

/// True iff `text` parses and describes exactly the objects of `scene`, with
/// the stated relation holding between some matching pair.
pub fn scene_satisfies(scene: &Scene, text: &str) -> bool {
    let Some(cap) = Caption::parse(text) else { return false };
    let mut mentioned = cap.mentioned();
    let mut present: Vec<Attrs> = scene.objects().iter().map(|o| (o.color, o.shape)).collect();
    mentioned.sort();
    present.sort();
    if mentioned != present {
        return false;
    }
    match cap.relation {
        None => true,
        Some((rel, b)) => {
            let objs = scene.objects();
            objs.iter().enumerate().any(|(i, oa)| {
                (oa.color, oa.shape) == cap.subject
                    && objs.iter().enumerate().any(|(j, ob)| i != j && (ob.color, ob.shape) == b && rel.holds(oa, ob))
            })
        }
    }
}

/// Every terminal word of the grammar, one per entry.
pub fn grammar_terminals() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Color::ALL.iter().map(|c| c.word()).collect();
    words.extend(Shape::ALL.iter().map(|s| s.word()));
    words.extend(["left", "right", "of", "above", "below", "and"]);
    words
}
