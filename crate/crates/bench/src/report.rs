//! `results.csv`, `report.md` and `verify.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::bench::{doubling_ratios, speedup, BenchRecord};
use crate::config::{EngineKind, RunConfig};
use crate::verify::VerifyReport;
use crate::Result;

pub const CSV_HEADER: &str = "engine,seq_len,batch,wall_ms_median,tokens_per_s,peak_bytes,seed";

/// Skipped runs keep their row with the three measurement fields empty.
pub fn render_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.engine,
            r.seq_len,
            r.batch,
            opt(r.wall_ms_median.map(|v| format!("{v:.4}"))),
            opt(r.tokens_per_s.map(|v| format!("{v:.1}"))),
            opt(r.peak_bytes.map(|v| v.to_string())),
            r.seed
        );
    }
    out
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.digits$}"))
}

pub fn render_markdown(config: &RunConfig, records: &[BenchRecord], peak_tracked: bool) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Forward-pass benchmark\n");
    let _ = writeln!(
        md,
        "Throughput below is **forward-only** (no backward pass), measured on this machine. \
         Ratios between engines and between lengths are the meaningful quantities.\n"
    );
    let _ = writeln!(md, "## Configuration\n\n```toml\n{}```\n", config.to_toml());

    let _ = writeln!(md, "## Timings\n");
    let _ = writeln!(md, "| engine | seq_len | batch | wall ms (median) | tokens/s (forward) | peak bytes |");
    let _ = writeln!(md, "|---|---:|---:|---:|---:|---:|");
    for r in records {
        if let Some(reason) = &r.skipped {
            let _ = writeln!(md, "| {} | {} | {} | skipped | {reason} | |", r.engine, r.seq_len, r.batch);
            continue;
        }
        let peak = if peak_tracked {
            r.peak_bytes.map_or_else(|| "n/a".into(), |b| b.to_string())
        } else {
            "not tracked".into()
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {peak} |",
            r.engine,
            r.seq_len,
            r.batch,
            fmt_opt(r.wall_ms_median, 3),
            fmt_opt(r.tokens_per_s, 0)
        );
    }

    let engines: Vec<EngineKind> = config.engines.clone();
    for (title, reference) in [
        ("Speedup vs symbolic MKA", EngineKind::SymbolicMka),
        ("Speedup vs MHA", EngineKind::Mha),
    ] {
        if !engines.contains(&reference) {
            continue;
        }
        let _ = writeln!(md, "\n## {title}\n");
        let _ = write!(md, "| engine |");
        for s in &config.seq_lens {
            let _ = write!(md, " {s} |");
        }
        let _ = write!(md, "\n|---|");
        for _ in &config.seq_lens {
            let _ = write!(md, "---:|");
        }
        md.push('\n');
        for &e in &engines {
            let _ = write!(md, "| {e} |");
            for &s in &config.seq_lens {
                let _ = write!(md, " {} |", fmt_opt(speedup(records, e, reference, s), 2));
            }
            md.push('\n');
        }
    }

    let _ = writeln!(md, "\n## Doubling ratios time(2N)/time(N)\n");
    let _ = writeln!(md, "| engine | N → 2N | ratio |");
    let _ = writeln!(md, "|---|---|---:|");
    for &e in &engines {
        for (n, n2, ratio) in doubling_ratios(records, e) {
            let _ = writeln!(md, "| {e} | {n} → {n2} | {ratio:.2} |");
        }
    }
    md
}

pub fn write_bench(dir: &Path, config: &RunConfig, records: &[BenchRecord], peak_tracked: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), render_csv(records))?;
    fs::write(dir.join("report.md"), render_markdown(config, records, peak_tracked))?;
    Ok(())
}

pub fn write_verify(path: &Path, report: &VerifyReport) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(engine: EngineKind, seq_len: usize, ms: Option<f64>) -> BenchRecord {
        BenchRecord {
            engine,
            seq_len,
            batch: 2,
            wall_ms_median: ms,
            tokens_per_s: ms.map(|m| (2 * seq_len) as f64 / (m / 1e3)),
            peak_bytes: ms.map(|_| 1234),
            seed: 7,
            skipped: ms.is_none().then(|| "too big".into()),
        }
    }

    #[test]
    fn csv_schema() {
        let csv = render_csv(&[rec(EngineKind::Fastmka, 512, Some(2.0)), rec(EngineKind::Mha, 1024, None)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "fastmka,512,2,2.0000,512000.0,1234,7");
        assert_eq!(lines[2], "mha,1024,2,,,,7");
        assert!(lines.iter().all(|l| l.split(',').count() == 7));
    }

    #[test]
    fn markdown_has_config_and_ratio_sections() {
        let mut c = RunConfig::default();
        c.engines = vec![EngineKind::Mha, EngineKind::SymbolicMka];
        c.seq_lens = vec![512, 1024];
        let rs = vec![
            rec(EngineKind::Mha, 512, Some(1.0)),
            rec(EngineKind::Mha, 1024, Some(4.0)),
            rec(EngineKind::SymbolicMka, 512, Some(3.0)),
            rec(EngineKind::SymbolicMka, 1024, None),
        ];
        let md = render_markdown(&c, &rs, true);
        assert!(md.contains("forward-only"));
        assert!(md.contains("seq_lens = [512, 1024]"));
        assert!(md.contains("## Speedup vs symbolic MKA"));
        assert!(md.contains("| mha | 512 → 1024 | 4.00 |"));
        assert!(md.contains("| symbolic_mka | 1024 | 2 | skipped | too big | |"));
    }
}
