//! Text dumps of the selection matrices used by each head.

use std::fmt::Write as _;

use bootvit_core::inductive_bias::head_biases;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Dense,
    Triplets,
}

impl Layout {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dense" => Some(Self::Dense),
            "triplets" => Some(Self::Triplets),
            _ => None,
        }
    }
}

/// One block per head on a `side x side` token map, headed by the
/// kernel offset.
pub fn inspect_phi(heads: usize, side: usize, layout: Layout) -> Result<String> {
    let set = head_biases(heads, (side, side))?;
    let n = set.n();
    let mut s = String::new();
    for (h, m) in set.matrices.iter().enumerate() {
        let _ = writeln!(s, "# head {h} offset ({}, {}) n {n}", m.offset.0, m.offset.1);
        match layout {
            Layout::Triplets => s.push_str(&m.to_triplets()),
            Layout::Dense => {
                let map = m.index_map();
                for col in &map {
                    let row: Vec<&str> = (0..n).map(|j| if *col == Some(j) { "1" } else { "0" }).collect();
                    let _ = writeln!(s, "{}", row.join(" "));
                }
            }
        }
    }
    Ok(s)
}
