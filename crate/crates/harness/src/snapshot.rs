//! Flat binary state snapshots: header, then `q` and `q_dot` as little-endian f64.

use std::path::{Path, PathBuf};

use dabd_core::body::Dof;

use crate::error::{HarnessError, Result};

const MAGIC: &[u8; 4] = b"DABD";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub frame: u64,
    pub q: Vec<Dof>,
    pub q_dot: Vec<Dof>,
}

impl Snapshot {
    pub fn encode(&self) -> Vec<u8> {
        assert_eq!(self.q.len(), self.q_dot.len());
        let mut out = Vec::with_capacity(HEADER + 96 * self.q.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.frame.to_le_bytes());
        out.extend_from_slice(&(self.q.len() as u64).to_le_bytes());
        for d in self.q.iter().chain(&self.q_dot) {
            for x in d.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER || &bytes[..4] != MAGIC {
            return Err(HarnessError::Snapshot("bad magic".into()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(HarnessError::Snapshot(format!(
                "unsupported version {version}"
            )));
        }
        let frame = word(8);
        let n = usize::try_from(word(16))
            .map_err(|_| HarnessError::Snapshot("body count overflow".into()))?;
        let expected = n.checked_mul(96).and_then(|b| b.checked_add(HEADER));
        if expected != Some(bytes.len()) {
            return Err(HarnessError::Snapshot(format!(
                "length {} does not match {n} bodies",
                bytes.len()
            )));
        }
        let mut dofs = bytes[HEADER..].chunks_exact(48).map(|c| {
            Dof::from_iterator(
                c.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))),
            )
        });
        let q = dofs.by_ref().take(n).collect();
        let q_dot = dofs.collect();
        Ok(Self { frame, q, q_dot })
    }

    pub fn file_name(frame: u64) -> String {
        format!("frame_{frame:04}.bin")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(Self::file_name(self.frame));
        std::fs::write(&path, self.encode())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Largest coordinate difference between two snapshots of the same scene.
pub fn max_abs_diff(a: &Snapshot, b: &Snapshot) -> Option<f64> {
    if a.q.len() != b.q.len() {
        return None;
    }
    let d =
        a.q.iter()
            .zip(&b.q)
            .chain(a.q_dot.iter().zip(&b.q_dot))
            .map(|(x, y)| (x - y).amax())
            .fold(0.0, f64::max);
    Some(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_file() {
        let dir = tempfile::tempdir().unwrap();
        let s = Snapshot {
            frame: 7,
            q: vec![
                Dof::new(1.0, -2.0, 1.0, 0.0, 0.0, 1.0),
                Dof::repeat(f64::MIN_POSITIVE),
            ],
            q_dot: vec![Dof::repeat(-0.0), Dof::repeat(1e300)],
        };
        let path = s.write(dir.path()).unwrap();
        assert!(path.ends_with("frame_0007.bin"));
        let back = Snapshot::read(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.q_dot[0][0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(max_abs_diff(&s, &back), Some(0.0));
    }

    #[test]
    fn bad_input_rejected() {
        let s = Snapshot {
            frame: 1,
            q: vec![Dof::zeros()],
            q_dot: vec![Dof::zeros()],
        };
        let b = s.encode();
        assert!(Snapshot::decode(&b[..b.len() - 1]).is_err());
        assert!(Snapshot::decode(b"XXXX").is_err());
        let mut v = b.clone();
        v[4] = 9;
        assert!(Snapshot::decode(&v).is_err());
        let mut v = b;
        v[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Snapshot::decode(&v).is_err());
    }

    proptest! {
        #[test]
        fn bits_survive(xs in proptest::collection::vec(any::<f64>(), 12), frame in any::<u64>()) {
            let s = Snapshot {
                frame,
                q: vec![Dof::from_column_slice(&xs[..6])],
                q_dot: vec![Dof::from_column_slice(&xs[6..])],
            };
            let back = Snapshot::decode(&s.encode()).unwrap();
            for (a, b) in s.q.iter().chain(&s.q_dot).zip(back.q.iter().chain(&back.q_dot)) {
                for i in 0..6 {
                    prop_assert_eq!(a[i].to_bits(), b[i].to_bits());
                }
            }
        }

        #[test]
        fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = Snapshot::decode(&bytes);
        }
    }
}
