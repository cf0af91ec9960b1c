//! FSL-style `bval` (one row) and `bvec` (three rows) text files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::AcquisitionScheme;

fn rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Malformed(format!("{}: bad number {t:?}", path.display()))))
                .collect()
        })
        .collect()
}

pub fn read_scheme(bval: impl AsRef<Path>, bvec: impl AsRef<Path>) -> Result<AcquisitionScheme> {
    let (bval, bvec) = (bval.as_ref(), bvec.as_ref());
    let b: Vec<f64> = rows(bval)?.concat();
    let g = rows(bvec)?;
    if g.len() != 3 || g.iter().any(|r| r.len() != b.len()) {
        return Err(Error::Malformed(format!(
            "{}: expected 3 rows of {} values",
            bvec.display(),
            b.len()
        )));
    }
    let dirs = (0..b.len()).map(|i| [g[0][i], g[1][i], g[2][i]]).collect();
    AcquisitionScheme::new(b, dirs)
}

fn join(v: impl Iterator<Item = f64>) -> String {
    v.map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

pub fn write_scheme(s: &AcquisitionScheme, bval: impl AsRef<Path>, bvec: impl AsRef<Path>) -> Result<()> {
    let (bval, bvec) = (bval.as_ref(), bvec.as_ref());
    fs::write(bval, join(s.bvalues.iter().copied()) + "\n").map_err(|e| Error::io(bval, e))?;
    let text: String = (0..3).map(|a| join(s.directions.iter().map(|d| d[a])) + "\n").collect();
    fs::write(bvec, text).map_err(|e| Error::io(bvec, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = AcquisitionScheme::new(
            vec![0.0, 1000.0, 1000.0],
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.6, -0.8, 0.0]],
        )
        .unwrap();
        let (a, b) = (dir.path().join("bval"), dir.path().join("bvec"));
        write_scheme(&s, &a, &b).unwrap();
        assert_eq!(fs::read_to_string(&b).unwrap(), "0 1 0.6\n0 0 -0.8\n0 0 0\n");
        assert_eq!(read_scheme(&a, &b).unwrap(), s);
    }

    #[test]
    fn ragged_bvec_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("bval"), dir.path().join("bvec"));
        fs::write(&a, "0 1000\n").unwrap();
        fs::write(&b, "0 1\n0 0\n").unwrap();
        assert!(matches!(read_scheme(&a, &b), Err(Error::Malformed(_))));
        fs::write(&b, "0 1\n0 0\n0 x\n").unwrap();
        assert!(matches!(read_scheme(&a, &b), Err(Error::Malformed(_))));
    }
}
