use std::fmt::Write as _;
use std::path::Path;

use super::{Hypergraph, HypergraphError};

/// Parses the text format: a `n m` header followed by `m` lines of
/// `k id_1 ... id_k`. Lines starting with `#` and blank lines are skipped.
pub fn parse_hypergraph(text: &str) -> Result<Hypergraph, HypergraphError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines.next().ok_or(HypergraphError::Parse {
        line: 0,
        msg: "missing `n m` header".into(),
    })?;
    let nums = parse_ints(hline, header)?;
    let [n, m] = nums[..] else {
        return Err(HypergraphError::Parse {
            line: hline,
            msg: format!("header needs exactly two integers, got {}", nums.len()),
        });
    };

    let mut edges = Vec::with_capacity(m);
    for (line, body) in lines {
        let nums = parse_ints(line, body)?;
        let Some((&k, ids)) = nums.split_first() else {
            unreachable!("blank lines are filtered")
        };
        if k != ids.len() {
            return Err(HypergraphError::Parse {
                line,
                msg: format!("declared size {k} but {} ids follow", ids.len()),
            });
        }
        if k < 2 {
            return Err(HypergraphError::Parse {
                line,
                msg: format!("hyperedge size {k} < 2"),
            });
        }
        edges.push(ids.to_vec());
    }
    if edges.len() != m {
        return Err(HypergraphError::Parse {
            line: 1,
            msg: format!("header declares {m} hyperedges, found {}", edges.len()),
        });
    }
    Hypergraph::new(n, &edges)
}

fn parse_ints(line: usize, body: &str) -> Result<Vec<usize>, HypergraphError> {
    body.split(' ')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>().map_err(|e| HypergraphError::Parse {
                line,
                msg: format!("`{t}`: {e}"),
            })
        })
        .collect()
}

/// Serializes in the text format accepted by [`parse_hypergraph`].
pub fn format_hypergraph(h: &Hypergraph) -> String {
    let mut out = String::new();
    writeln!(out, "{} {}", h.num_nodes(), h.num_edges()).unwrap();
    for members in h.edges() {
        write!(out, "{}", members.len()).unwrap();
        for v in members {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn read_hypergraph(path: impl AsRef<Path>) -> Result<Hypergraph, HypergraphError> {
    parse_hypergraph(&std::fs::read_to_string(path)?)
}

pub fn write_hypergraph(h: &Hypergraph, path: impl AsRef<Path>) -> Result<(), HypergraphError> {
    crate::io_util::write_atomic(path.as_ref(), format_hypergraph(h).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_comments() {
        let h = parse_hypergraph("# contact toy\n3 2\n3 0 1 2\n# pair\n2 0 1\n").unwrap();
        assert_eq!(h.edge_lists(), vec![vec![0, 1, 2], vec![0, 1]]);
        assert_eq!(format_hypergraph(&h), "3 2\n3 0 1 2\n2 0 1\n");
    }

    #[test]
    fn rejects_malformed() {
        assert!(matches!(parse_hypergraph(""), Err(HypergraphError::Parse { .. })));
        assert!(matches!(
            parse_hypergraph("3 1\n3 0 1\n"),
            Err(HypergraphError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_hypergraph("3 1\n1 0\n"),
            Err(HypergraphError::Parse { line: 2, .. })
        ));
        assert!(matches!(parse_hypergraph("3 2\n2 0 1\n"), Err(HypergraphError::Parse { .. })));
        assert!(matches!(
            parse_hypergraph("3 1\n2 0 x\n"),
            Err(HypergraphError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_hypergraph("3 1\n2 0 5\n"),
            Err(HypergraphError::OutOfRangeNode { .. })
        ));
    }
}
