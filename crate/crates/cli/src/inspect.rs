use std::path::PathBuf;

use clap::{Args, ValueEnum};
use tfrestore_core::nn::load_checkpoint;
use tfrestore_core::restormer::{Mode, ModelConfig};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Published sizes the report compares against.
const REFERENCE_OFFLINE: f64 = 30.1e6;
const REFERENCE_STREAMING: f64 = 19.0e6;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    FullOffline,
    FullStreaming,
    Tiny,
}

/// Print parameter counts per module and the total.
#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint file.
    #[arg(long, conflicts_with_all = ["config", "preset"], required_unless_present_any = ["config", "preset"])]
    ckpt: Option<PathBuf>,
    /// Config file; its [train.model] section is counted.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in model configuration.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Name components per group; block indices are folded together.
    #[arg(long, default_value_t = 3)]
    depth: usize,
}

fn group_key(name: &str, depth: usize) -> String {
    name.split('.')
        .take(depth.max(1))
        .map(|c| if c.chars().all(|ch| ch.is_ascii_digit()) { "*" } else { c })
        .collect::<Vec<_>>()
        .join(".")
}

pub fn run(args: InspectArgs) -> Result<()> {
    let (entries, model_cfg): (Vec<(String, usize)>, Option<ModelConfig>) = if let Some(path) = &args.ckpt {
        let c = load_checkpoint(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let cfg = c.meta.get("model").and_then(|m| serde_json::from_value(m.clone()).ok());
        (c.tensors.iter().map(|(n, t)| (n.clone(), t.numel())).collect(), cfg)
    } else {
        let cfg = match (&args.config, args.preset) {
            (Some(p), _) => RunConfig::load(p)?.train.model,
            (None, Some(Preset::FullOffline)) => ModelConfig::full_offline(),
            (None, Some(Preset::FullStreaming)) => ModelConfig::full_streaming(),
            (None, Some(Preset::Tiny)) => ModelConfig::tiny(),
            (None, None) => unreachable!("clap requires one source"),
        };
        cfg.validate()?;
        let entries = cfg.param_shapes().into_iter().map(|(n, s)| (n, s.iter().product())).collect();
        (entries, Some(cfg))
    };

    let mut groups: Vec<(String, usize, usize)> = Vec::new();
    for (name, n) in &entries {
        let key = group_key(name, args.depth);
        match groups.iter_mut().find(|(k, _, _)| *k == key) {
            Some((_, c, t)) => {
                *c += n;
                *t += 1;
            }
            None => groups.push((key, *n, 1)),
        }
    }
    let total: usize = entries.iter().map(|(_, n)| n).sum();
    println!("{:<36} {:>8} {:>12} {:>7}", "module", "tensors", "params", "share");
    for (k, c, t) in &groups {
        println!("{k:<36} {t:>8} {c:>12} {:>6.2}%", 100.0 * *c as f64 / total.max(1) as f64);
    }
    println!("{:<36} {:>8} {total:>12}", "total", entries.len());

    if let Some(cfg) = model_cfg {
        let (reference, label) = match cfg.mode {
            Mode::Offline => (REFERENCE_OFFLINE, "offline"),
            Mode::Streaming => (REFERENCE_STREAMING, "streaming"),
        };
        let dev = total as f64 / reference - 1.0;
        println!(
            "reference {label} size {:.1}M; this config {:.2}M ({:+.1}%)",
            reference / 1e6,
            total as f64 / 1e6,
            100.0 * dev
        );
        println!(
            "channels c_e={} c_d={}, blocks b_e={} b_d={}, heads {}, f_proj {}, conv-ffn {:?}, ablation {:?}",
            cfg.c_e, cfg.c_d, cfg.encoder_blocks(), cfg.b_d, cfg.heads, cfg.f_proj, cfg.conv_ffn, cfg.ablation
        );
        if dev.abs() > 0.2 {
            println!("note: outside ±20% of the reference; only the full-size presets are expected to land near it");
        }
    }
    Ok(())
}
