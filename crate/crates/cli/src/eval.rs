use std::collections::HashMap;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use tfrestore_core::degrade::load_wav_dir;
use tfrestore_core::metrics::{evaluate, settings_json, summarize, MetricRow};
use tfrestore_core::wav::read_wav;

use crate::config::require_dir;
use crate::error::{CliError, Result};

/// Score estimates against references, matched by file name.
#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of clean reference WAVs.
    #[arg(long)]
    ref_dir: PathBuf,
    /// Directory of restored WAVs with the same file names.
    #[arg(long)]
    est_dir: PathBuf,
    /// Per-file CSV report.
    #[arg(long)]
    out: PathBuf,
    /// Summary JSON; defaults to the report path with a .json extension.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ReportRow<'a> {
    id: &'a str,
    lsd: f64,
    mcd: f64,
    sdr: f64,
    si_sdr: f64,
}

pub fn run(args: EvalArgs, jobs: usize) -> Result<()> {
    require_dir(&args.ref_dir, "reference")?;
    require_dir(&args.est_dir, "estimate")?;
    let refs = load_wav_dir(&args.ref_dir)?;
    if refs.is_empty() {
        return Err(CliError::Data(format!("no WAV files in {}", args.ref_dir.display())));
    }
    let ests: HashMap<String, PathBuf> = load_wav_dir(&args.est_dir)?.into_iter().collect();
    let mut pairs = Vec::with_capacity(refs.len());
    for (id, r) in &refs {
        let e = ests
            .get(id)
            .ok_or_else(|| CliError::Data(format!("no estimate for `{id}` in {}", args.est_dir.display())))?;
        pairs.push((id.as_str(), r.clone(), e.clone()));
    }

    let score = |i: usize| -> Result<MetricRow> {
        let (id, r, e) = &pairs[i];
        let (r, e) = (read_wav(r)?, read_wav(e)?);
        evaluate(&e, &r).map_err(|err| CliError::from(err).context(id))
    };
    let jobs = jobs.clamp(1, pairs.len());
    let mut rows: Vec<Option<Result<MetricRow>>> = (0..pairs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let score = &score;
                let n = pairs.len();
                s.spawn(move || (w..n).step_by(jobs).map(|i| (i, score(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                rows[i] = Some(r);
            }
        }
    });
    let rows: Vec<MetricRow> = rows.into_iter().map(|r| r.expect("every index visited")).collect::<Result<_>>()?;

    let mut w = csv::Writer::from_path(&args.out)?;
    for ((id, _, _), m) in pairs.iter().zip(&rows) {
        w.serialize(ReportRow { id, lsd: m.lsd, mcd: m.mcd, sdr: m.sdr, si_sdr: m.si_sdr })?;
    }
    w.flush().map_err(|e| CliError::io(&args.out, e))?;

    let summary = summarize(&rows);
    let json_path = args.json.unwrap_or_else(|| args.out.with_extension("json"));
    let doc = serde_json::json!({ "summary": summary, "settings": settings_json() });
    let text = serde_json::to_string_pretty(&doc).expect("summary serializes");
    std::fs::write(&json_path, text).map_err(|e| CliError::io(&json_path, e))?;

    println!("files  {}", summary.count);
    for (name, m) in [("LSD", summary.lsd), ("MCD", summary.mcd), ("SDR", summary.sdr), ("SI-SDR", summary.si_sdr)] {
        println!("{name:<6} {:.4} ± {:.4}", m.mean, m.std);
    }
    Ok(())
}
