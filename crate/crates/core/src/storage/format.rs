//! `PTGD` dataset files.
//!
//! ```text
//! b"PTGD" | header_len: u64 LE | header: JSON | count records
//! record = s (state_dim) | a (action_dim) | r | s' (state_dim) | done (0.0 / 1.0)
//! ```
//!
//! Every record field is a little-endian `f64`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Transition;
use crate::error::{Error, Result};
use crate::numkit::checkpoint::{read_f64s, read_framed, write_f64s, write_framed};

pub const DATASET_MAGIC: &[u8; 4] = b"PTGD";

/// A static dataset of transitions plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub env: String,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Generator recipe, e.g. `"random"` or `"medium_replay"`.
    pub recipe: String,
    pub seed: u64,
    #[serde(skip)]
    pub transitions: Vec<Transition>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    env: String,
    state_dim: usize,
    action_dim: usize,
    count: usize,
    recipe: String,
    seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn to_buffer(&self) -> Result<super::ReplayBuffer> {
        super::ReplayBuffer::from_transitions(self.transitions.clone(), self.state_dim, self.action_dim)
    }
}

pub fn write_dataset<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    let header = Header {
        env: ds.env.clone(),
        state_dim: ds.state_dim,
        action_dim: ds.action_dim,
        count: ds.transitions.len(),
        recipe: ds.recipe.clone(),
        seed: ds.seed,
    };
    write_framed(w, DATASET_MAGIC, &serde_json::to_vec(&header)?)?;
    let width = 2 * ds.state_dim + ds.action_dim + 2;
    let mut rec = Vec::with_capacity(width);
    for t in &ds.transitions {
        if t.s.len() != ds.state_dim || t.a.len() != ds.action_dim || t.s_next.len() != ds.state_dim {
            return Err(Error::Shape("dataset transition dims do not match header".into()));
        }
        rec.clear();
        rec.extend_from_slice(&t.s);
        rec.extend_from_slice(&t.a);
        rec.push(t.r);
        rec.extend_from_slice(&t.s_next);
        rec.push(if t.done { 1.0 } else { 0.0 });
        write_f64s(w, &rec)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<Dataset> {
    let header: Header = serde_json::from_slice(&read_framed(r, DATASET_MAGIC)?)?;
    let (sd, ad) = (header.state_dim, header.action_dim);
    let mut rec = vec![0.0; 2 * sd + ad + 2];
    let mut transitions = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        read_f64s(r, &mut rec)?;
        let done = rec[2 * sd + ad + 1];
        if done != 0.0 && done != 1.0 {
            return Err(Error::Format(format!("done flag must be 0 or 1, found {done}")));
        }
        transitions.push(Transition {
            s: rec[..sd].to_vec(),
            a: rec[sd..sd + ad].to_vec(),
            r: rec[sd + ad],
            s_next: rec[sd + ad + 1..2 * sd + ad + 1].to_vec(),
            done: done == 1.0,
        });
    }
    Ok(Dataset {
        env: header.env,
        state_dim: sd,
        action_dim: ad,
        recipe: header.recipe,
        seed: header.seed,
        transitions,
    })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write_dataset(&mut f, ds)?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    read_dataset(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_transition() -> impl Strategy<Value = Transition> {
        (
            prop::collection::vec(-1e6..1e6f64, 3),
            prop::collection::vec(-2.0..2.0f64, 2),
            -1e3..1e3f64,
            prop::collection::vec(-1e6..1e6f64, 3),
            any::<bool>(),
        )
            .prop_map(|(s, a, r, s_next, done)| Transition { s, a, r, s_next, done })
    }

    proptest! {
        #[test]
        fn save_load_is_byte_identical(ts in prop::collection::vec(arb_transition(), 0..20), seed in any::<u64>()) {
            let ds = Dataset {
                env: "pointmass".into(),
                state_dim: 3,
                action_dim: 2,
                recipe: "random".into(),
                seed,
                transitions: ts,
            };
            let mut buf = Vec::new();
            write_dataset(&mut buf, &ds).unwrap();
            let back = read_dataset(&mut std::io::Cursor::new(&buf)).unwrap();
            prop_assert_eq!(&back, &ds);
            let mut again = Vec::new();
            write_dataset(&mut again, &back).unwrap();
            prop_assert_eq!(buf, again);
        }
    }

    #[test]
    fn header_fields_are_present() {
        let ds = Dataset {
            env: "cliffmass".into(),
            state_dim: 1,
            action_dim: 1,
            recipe: "random".into(),
            seed: 7,
            transitions: vec![Transition { s: vec![1.0], a: vec![0.5], r: -1.0, s_next: vec![2.0], done: true }],
        };
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        assert_eq!(&buf[..4], b"PTGD");
        let hlen = u64::from_le_bytes(buf[4..12].try_into().unwrap()) as usize;
        let h: serde_json::Value = serde_json::from_slice(&buf[12..12 + hlen]).unwrap();
        assert_eq!(h["count"], 1);
        assert_eq!(h["env"], "cliffmass");
        let body = &buf[12 + hlen..];
        assert_eq!(body.len(), 5 * 8);
        assert_eq!(f64::from_le_bytes(body[32..40].try_into().unwrap()), 1.0);
    }
}
