//! `uid,d,t,x,y` trajectory files.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DataError, GridSpec, Observation, Trajectory, SLOTS_PER_DAY};

const HEADER: &str = "uid,d,t,x,y";

pub fn parse_trajectory_csv(path: &Path, grid: &GridSpec) -> Result<Vec<Trajectory>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_owned(), source })?;
    read_trajectories(&text, grid)
}

/// Parses CSV text; one trajectory per uid, ascending by uid.
pub fn read_trajectories(text: &str, grid: &GridSpec) -> Result<Vec<Trajectory>, DataError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        _ => return Err(DataError::MalformedRow { line: 1, reason: format!("expected header `{HEADER}`") }),
    }
    let mut by_user: BTreeMap<u64, Vec<Observation>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 5 {
            return Err(DataError::MalformedRow { line, reason: format!("expected 5 fields, got {}", fields.len()) });
        }
        let int = |i: usize| -> Result<u64, DataError> {
            fields[i].trim().parse::<u64>().map_err(|_| DataError::MalformedRow {
                line,
                reason: format!("field {} is not a non-negative integer: {:?}", i + 1, fields[i]),
            })
        };
        let (uid, day, slot, x, y) = (int(0)?, int(1)?, int(2)?, int(3)?, int(4)?);
        if slot >= SLOTS_PER_DAY as u64 {
            return Err(DataError::MalformedRow { line, reason: format!("slot {slot} outside [0, 48)") });
        }
        let day = u32::try_from(day).map_err(|_| DataError::MalformedRow { line, reason: "day too large".into() })?;
        let (x, y) = match (u32::try_from(x), u32::try_from(y)) {
            (Ok(x), Ok(y)) if grid.contains(x, y) => (x, y),
            _ => return Err(DataError::OutOfGridRow { line }),
        };
        let slot = slot as u32;
        if !seen.insert((uid, day, slot)) {
            return Err(DataError::DuplicateObservation { uid, day, slot });
        }
        by_user.entry(uid).or_default().push(Observation { day, slot, x, y });
    }
    by_user
        .into_iter()
        .map(|(uid, mut obs)| {
            obs.sort_by_key(Observation::timestamp);
            Trajectory::new(uid, obs)
        })
        .collect()
}

/// Serializes trajectories in uid order, each sorted by (day, slot).
pub fn write_trajectory_csv(path: &Path, trajectories: &[Trajectory]) -> Result<(), DataError> {
    fs::write(path, to_csv_string(trajectories)).map_err(|source| DataError::Io { path: path.to_owned(), source })
}

/// Hex SHA-256 of the canonical CSV rendering.
pub fn dataset_fingerprint(trajectories: &[Trajectory]) -> String {
    Sha256::digest(to_csv_string(trajectories).as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn to_csv_string(trajectories: &[Trajectory]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for t in trajectories {
        for o in t.observations() {
            let _ = writeln!(out, "{},{},{},{},{}", t.user_id, o.day, o.slot, o.x, o.y);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn grid() -> GridSpec {
        GridSpec::default()
    }

    #[test]
    fn parses_small_file() {
        let text = "uid,d,t,x,y\n5,0,1,10,20\n5,0,2,10,21\n5,1,0,11,20\n";
        let t = read_trajectories(text, &grid()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].user_id, 5);
        assert_eq!(t[0].observations().len(), 3);
    }

    #[test]
    fn slot_48_is_malformed() {
        let text = "uid,d,t,x,y\n5,0,48,10,20\n";
        assert!(matches!(read_trajectories(text, &grid()), Err(DataError::MalformedRow { line: 2, .. })));
    }

    #[test]
    fn error_cases() {
        let g = grid();
        assert!(matches!(read_trajectories("uid,x\n", &g), Err(DataError::MalformedRow { line: 1, .. })));
        assert!(matches!(
            read_trajectories("uid,d,t,x,y\n1,0,0,201,3\n", &g),
            Err(DataError::OutOfGridRow { line: 2 })
        ));
        assert!(matches!(
            read_trajectories("uid,d,t,x,y\n1,0,0,0,3\n", &g),
            Err(DataError::OutOfGridRow { line: 2 })
        ));
        assert!(matches!(
            read_trajectories("uid,d,t,x,y\n1,0,0,1,3\n1,0,0,2,3\n", &g),
            Err(DataError::DuplicateObservation { uid: 1, day: 0, slot: 0 })
        ));
        assert!(matches!(
            read_trajectories("uid,d,t,x,y\n1,-1,0,1,3\n", &g),
            Err(DataError::MalformedRow { line: 2, .. })
        ));
        assert!(matches!(
            read_trajectories("uid,d,t,x,y\n1,0,0,1\n", &g),
            Err(DataError::MalformedRow { line: 2, .. })
        ));
    }

    #[test]
    fn interleaved_users_match_sort_and_group() {
        let rows = [(2, 3, 5, 1, 1), (1, 0, 7, 2, 2), (2, 0, 1, 3, 3), (1, 0, 2, 4, 4), (2, 3, 4, 5, 5), (1, 2, 0, 6, 6)];
        let mut text = String::from("uid,d,t,x,y\n");
        for r in rows {
            text.push_str(&format!("{},{},{},{},{}\n", r.0, r.1, r.2, r.3, r.4));
        }
        let parsed = read_trajectories(&text, &grid()).unwrap();

        // Reference: sort all rows by (uid, day, slot) then group.
        let mut sorted = rows.to_vec();
        sorted.sort_by_key(|r| (r.0, r.1, r.2));
        let mut expect: Vec<(u64, Vec<Observation>)> = Vec::new();
        for r in sorted {
            let o = Observation { day: r.1, slot: r.2, x: r.3, y: r.4 };
            match expect.last_mut() {
                Some((u, v)) if *u == r.0 => v.push(o),
                _ => expect.push((r.0, vec![o])),
            }
        }
        assert_eq!(parsed.len(), 2);
        for (t, (uid, obs)) in parsed.iter().zip(expect) {
            assert_eq!(t.user_id, uid);
            assert_eq!(t.observations(), obs.as_slice());
        }
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_observations(
            rows in proptest::collection::btree_set((0u64..5, 0u32..20, 0u32..48), 0..60),
            cells in proptest::collection::vec((1u32..=200, 1u32..=200), 60),
        ) {
            let mut text = String::from("uid,d,t,x,y\n");
            let mut expect = Vec::new();
            for (i, (u, d, s)) in rows.iter().enumerate() {
                let (x, y) = cells[i];
                text.push_str(&format!("{u},{d},{s},{x},{y}\n"));
                expect.push((*u, *d, *s, x, y));
            }
            let parsed = read_trajectories(&text, &grid()).unwrap();
            let again = read_trajectories(&to_csv_string(&parsed), &grid()).unwrap();
            prop_assert_eq!(&parsed, &again);
            let mut got: Vec<_> = parsed
                .iter()
                .flat_map(|t| t.observations().iter().map(move |o| (t.user_id, o.day, o.slot, o.x, o.y)))
                .collect();
            got.sort();
            expect.sort();
            prop_assert_eq!(got, expect);
        }
    }
}
