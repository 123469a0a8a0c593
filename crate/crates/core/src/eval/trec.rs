//! TREC run files: `qid Q0 docid rank score tag`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::metrics::{sort_ranking, Run};

pub fn write_run<W: Write>(w: &mut W, run: &Run, tag: &str) -> Result<()> {
    for (q, ranking) in run {
        let mut r = ranking.clone();
        sort_ranking(&mut r);
        for (i, (d, s)) in r.iter().enumerate() {
            writeln!(w, "{q} Q0 {d} {} {s} {tag}", i + 1)?;
        }
    }
    Ok(())
}

pub fn save_run(path: &Path, run: &Run, tag: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_run(&mut w, run, tag)?;
    w.flush()?;
    Ok(())
}

pub fn load_run(path: &Path) -> Result<Run> {
    let reader = BufReader::new(File::open(path)?);
    let mut run = Run::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [q, _, d, _, s, _] = parts[..] else {
            return Err(fail(format!("expected 6 fields, got {}", parts.len())));
        };
        let s: f64 = s
            .parse()
            .map_err(|e| fail(format!("bad score {s:?}: {e}")))?;
        let ranking = run.entry(q.to_string()).or_default();
        if ranking.iter().any(|(x, _)| x == d) {
            return Err(fail(format!("document {d:?} listed twice for query {q:?}")));
        }
        ranking.push((d.to_string(), s));
    }
    Ok(run)
}
