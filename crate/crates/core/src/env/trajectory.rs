//! On-disk trajectories: one PGM per observed frame plus a CSV manifest of
//! `file,action,raw_reward` rows in order. The action and reward on a row are
//! the ones that led to that frame (`-1` and `0` for the first frame).

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::{FRAME_LEN, SIDE};
use crate::pgm;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub frame: Vec<u8>,
    pub action: Option<usize>,
    pub raw_reward: f64,
}

pub fn write_trajectory(dir: &Path, records: &[TrajectoryRecord]) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = io::BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
    writeln!(manifest, "file,action,raw_reward")?;
    for (i, r) in records.iter().enumerate() {
        let name = format!("t{i:06}.pgm");
        pgm::write(&dir.join(&name), SIDE, SIDE, &r.frame)?;
        let action = r.action.map_or(-1, |a| a as i64);
        writeln!(manifest, "{name},{action},{}", r.raw_reward)?;
    }
    manifest.flush()
}

pub fn read_trajectory(dir: &Path) -> io::Result<Vec<TrajectoryRecord>> {
    let bad = |line: usize| io::Error::new(io::ErrorKind::InvalidData, format!("{MANIFEST} line {line} is malformed"));
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let [file, action, reward] = fields[..] else {
            return Err(bad(n + 1));
        };
        let (w, h, frame) = pgm::read(&dir.join(file))?;
        if (w, h) != (SIDE, SIDE) || frame.len() != FRAME_LEN {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{file} is not {SIDE}x{SIDE}"),
            ));
        }
        let action: i64 = action.parse().map_err(|_| bad(n + 1))?;
        out.push(TrajectoryRecord {
            frame,
            action: usize::try_from(action).ok(),
            raw_reward: reward.parse().map_err(|_| bad(n + 1))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<TrajectoryRecord> = (0..3)
            .map(|i| TrajectoryRecord {
                frame: vec![i as u8 * 40; FRAME_LEN],
                action: (i > 0).then_some(i),
                raw_reward: if i == 2 { -5.0 } else { 0.0 },
            })
            .collect();
        write_trajectory(dir.path(), &records).unwrap();
        assert_eq!(read_trajectory(dir.path()).unwrap(), records);
    }
}
