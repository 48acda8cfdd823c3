use std::collections::BTreeMap;

use thiserror::Error;

use crate::archive;
use crate::ids::RunId;
use crate::model::OutputBundle;

/// Name of the merged console inside the aggregated archive.
pub const MERGED_CONSOLE_FILE: &str = "merged_output.txt";

#[derive(Debug, Clone)]
pub struct RankedBundle {
    pub rank: u32,
    pub bundle: OutputBundle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestArchive {
    pub archive: Vec<u8>,
    pub merged_console: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("two bundles carry rank {0}")]
    DuplicateRank(u32),
    #[error("bundle of run {run_id} is unreadable: {source}")]
    CorruptBundle {
        run_id: RunId,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write aggregated archive: {0}")]
    Write(#[from] std::io::Error),
}

/// Section separator written ahead of each rank's console output.
pub fn section_header(rank: u32) -> String {
    format!("==> rank {rank} <==\n")
}

/// Concatenates console logs in ascending rank order, one section per rank.
pub fn merge_consoles<'a>(by_rank: impl IntoIterator<Item = (u32, &'a [u8])>) -> Vec<u8> {
    let mut out = Vec::new();
    for (rank, console) in by_rank {
        out.extend_from_slice(section_header(rank).as_bytes());
        out.extend_from_slice(console);
        if !console.is_empty() && !console.ends_with(b"\n") {
            out.push(b'\n');
        }
    }
    out
}

/// Builds the request-level download: each run's output directory under
/// `rank_<n>/`, plus [`MERGED_CONSOLE_FILE`] with console sections in
/// strictly ascending rank order regardless of input order.
pub fn aggregate_outputs(bundles: &[RankedBundle]) -> Result<RequestArchive, AggregateError> {
    let mut by_rank: BTreeMap<u32, &OutputBundle> = BTreeMap::new();
    for b in bundles {
        if by_rank.insert(b.rank, &b.bundle).is_some() {
            return Err(AggregateError::DuplicateRank(b.rank));
        }
    }

    let mut entries: Vec<(String, Vec<u8>)> = Vec::new();
    for (rank, bundle) in &by_rank {
        let files =
            archive::read_entries(&bundle.archive).map_err(|source| AggregateError::CorruptBundle {
                run_id: bundle.run_id,
                source,
            })?;
        for (path, bytes) in files {
            entries.push((format!("rank_{rank}/{path}"), bytes));
        }
    }
    let merged_console =
        merge_consoles(by_rank.iter().map(|(r, b)| (*r, b.console_log.as_slice())));
    entries.push((MERGED_CONSOLE_FILE.to_string(), merged_console.clone()));
    let archive = archive::pack_entries(&entries)?;
    Ok(RequestArchive {
        archive,
        merged_console,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CONSOLE_FILE;
    use proptest::prelude::*;

    fn bundle(rank: u32, console: &str) -> RankedBundle {
        let archive =
            archive::pack_entries(&[(CONSOLE_FILE, console.as_bytes())]).expect("pack");
        RankedBundle {
            rank,
            bundle: OutputBundle {
                run_id: RunId(100 + rank as u64),
                archive,
                console_log: console.as_bytes().to_vec(),
            },
        }
    }

    /// Independent oracle: sort by rank, then concatenate with the same
    /// framing written out by hand.
    fn oracle(mut items: Vec<(u32, String)>) -> Vec<u8> {
        items.sort_by_key(|(r, _)| *r);
        let mut s = String::new();
        for (r, c) in items {
            s += &format!("==> rank {r} <==\n{c}");
            if !c.is_empty() && !c.ends_with('\n') {
                s.push('\n');
            }
        }
        s.into_bytes()
    }

    #[test]
    fn singleton() {
        let out = aggregate_outputs(&[bundle(0, "z1,z2\n")]).unwrap();
        assert_eq!(out.merged_console, b"==> rank 0 <==\nz1,z2\n");
        let files = archive::list_files(&out.archive).unwrap();
        assert_eq!(files, vec!["merged_output.txt", "rank_0/output.txt"]);
    }

    #[test]
    fn out_of_order_arrival_is_sorted() {
        let out =
            aggregate_outputs(&[bundle(2, "two\n"), bundle(0, "zero\n"), bundle(1, "one")]).unwrap();
        let expected = oracle(vec![
            (2, "two\n".into()),
            (0, "zero\n".into()),
            (1, "one".into()),
        ]);
        assert_eq!(out.merged_console, expected);
        assert_eq!(
            String::from_utf8(out.merged_console).unwrap(),
            "==> rank 0 <==\nzero\n==> rank 1 <==\none\n==> rank 2 <==\ntwo\n"
        );
    }

    #[test]
    fn duplicate_rank_rejected() {
        let err = aggregate_outputs(&[bundle(0, "a"), bundle(0, "b")]).unwrap_err();
        assert!(matches!(err, AggregateError::DuplicateRank(0)));
    }

    #[test]
    fn empty_console_still_has_a_section() {
        let out = aggregate_outputs(&[bundle(0, "")]).unwrap();
        assert_eq!(out.merged_console, b"==> rank 0 <==\n");
    }

    proptest! {
        #[test]
        fn merged_order_matches_sort_oracle(
            consoles in proptest::collection::btree_map(0u32..40, "[a-z \n]{0,12}", 1..10),
            seed in any::<u64>(),
        ) {
            let mut items: Vec<(u32, String)> = consoles.into_iter().collect();
            // deterministic shuffle from the seed
            let mut s = seed | 1;
            for i in (1..items.len()).rev() {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                items.swap(i, (s % (i as u64 + 1)) as usize);
            }
            let bundles: Vec<RankedBundle> = items.iter().map(|(r, c)| bundle(*r, c)).collect();
            let out = aggregate_outputs(&bundles).unwrap();
            prop_assert_eq!(out.merged_console, oracle(items));
        }
    }
}
