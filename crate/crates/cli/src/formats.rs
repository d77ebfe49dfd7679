//! On-disk formats: JSONL episode files, JSON checkpoints and CSV tables.
//!
//! All writes go through [`write_atomic`], so a crashed run never leaves a
//! half-written file behind.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use cgnp_core::gpgen::Episode;
use cgnp_core::npmodels::{init_params, Model};
use cgnp_core::numkit::{BatchNormState, Matrix};
use cgnp_core::trainer::Metrics;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Result, RunConfig};

pub const CHECKPOINT_FORMAT: &str = "cgnp-checkpoint-1";

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One JSON object per line.
pub fn encode_episodes(episodes: &[Episode]) -> Vec<u8> {
    let mut out = Vec::new();
    for ep in episodes {
        // Serializing plain vectors of f64 cannot fail.
        serde_json::to_writer(&mut out, ep).expect("episode serializes");
        out.push(b'\n');
    }
    out
}

pub fn decode_episodes(bytes: &[u8], path: &Path) -> Result<Vec<Episode>> {
    let text = std::str::from_utf8(bytes).map_err(|e| CliError::format(path, e.to_string()))?;
    let mut episodes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(line)
            .map_err(|e| CliError::format(path, format!("line {}: {e}", i + 1)))?;
        ep.validate()
            .map_err(|e| CliError::format(path, format!("line {}: {e}", i + 1)))?;
        episodes.push(ep);
    }
    if episodes.is_empty() {
        return Err(CliError::EmptyEpisodeFile(path.display().to_string()));
    }
    Ok(episodes)
}

/// Returns the episodes with the SHA-256 of the file bytes.
pub fn read_episodes(path: &Path) -> Result<(Vec<Episode>, String)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let episodes = decode_episodes(&bytes, path)?;
    Ok((episodes, sha256_hex(&bytes)))
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<String> {
    let bytes = encode_episodes(episodes);
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormRecord {
    pub name: String,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub format: String,
    pub config: BTreeMap<String, String>,
    pub params: Vec<ParamRecord>,
    pub batch_norm: Vec<BatchNormRecord>,
}

pub fn encode_checkpoint(config: &RunConfig, model: &Model) -> Vec<u8> {
    let params = model
        .params
        .leaves()
        .map(|l| ParamRecord {
            name: l.name.clone(),
            rows: l.value.rows(),
            cols: l.value.cols(),
            values: l.value.data().to_vec(),
        })
        .collect();
    let batch_norm = model
        .params
        .batch_norms()
        .map(|(name, s)| BatchNormRecord {
            name: name.clone(),
            running_mean: s.running_mean.clone(),
            running_var: s.running_var.clone(),
            momentum: s.momentum,
            eps: s.eps,
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        config: config.to_map(),
        params,
        batch_norm,
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("checkpoint serializes");
    out.push(b'\n');
    out
}

pub fn write_checkpoint(path: &Path, config: &RunConfig, model: &Model) -> Result<()> {
    write_atomic(path, &encode_checkpoint(config, model))
}

/// Rebuilds the model, checking every stored shape against the one the
/// recorded configuration implies.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(RunConfig, Model)> {
    let file: CheckpointFile =
        serde_json::from_slice(bytes).map_err(|e| CliError::format(path, e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(CliError::format(path, format!("unsupported format `{}`", file.format)));
    }
    let config = RunConfig::from_map(&file.config)?;
    let mut params = init_params(&config.model_config())?;

    let mut seen = 0usize;
    for rec in &file.params {
        let leaf = params.leaf_mut(&rec.name).map_err(|_| {
            CliError::format(path, format!("parameter `{}` does not belong to this model", rec.name))
        })?;
        let (rows, cols) = leaf.value.shape();
        if (rec.rows, rec.cols) != (rows, cols) || rec.values.len() != rec.rows * rec.cols {
            return Err(CliError::ShapeMismatch {
                name: rec.name.clone(),
                expected: format!("{rows}x{cols}"),
                found: format!("{}x{} with {} values", rec.rows, rec.cols, rec.values.len()),
            });
        }
        leaf.value = Matrix::from_vec(rows, cols, rec.values.clone())?;
        seen += 1;
    }
    if seen != params.len() {
        return Err(CliError::format(
            path,
            format!("{} of {} parameters present", seen, params.len()),
        ));
    }

    let mut bn_seen = 0usize;
    for rec in &file.batch_norm {
        let state: &mut BatchNormState = params.batch_norm_mut(&rec.name).map_err(|_| {
            CliError::format(path, format!("batch-norm `{}` does not belong to this model", rec.name))
        })?;
        let w = state.width();
        if rec.running_mean.len() != w || rec.running_var.len() != w {
            return Err(CliError::ShapeMismatch {
                name: rec.name.clone(),
                expected: format!("width {w}"),
                found: format!("widths {}/{}", rec.running_mean.len(), rec.running_var.len()),
            });
        }
        *state = BatchNormState {
            running_mean: rec.running_mean.clone(),
            running_var: rec.running_var.clone(),
            momentum: rec.momentum,
            eps: rec.eps,
        };
        bn_seen += 1;
    }
    if bn_seen != params.batch_norms().count() {
        return Err(CliError::format(path, "missing batch-norm statistics"));
    }
    let model = Model {
        config: config.model_config(),
        params,
    };
    Ok((config, model))
}

pub fn read_checkpoint(path: &Path) -> Result<(RunConfig, Model)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub const METRICS_HEADER: &str = "model,rho,nll_per_point,nll_per_episode,mse,episode_count";

pub fn metrics_row(config: &RunConfig, m: &Metrics) -> String {
    format!(
        "{},{},{},{},{},{}",
        config.kind.as_str(),
        rho_field(config),
        m.nll_per_point,
        m.nll_per_episode,
        m.mse,
        m.episode_count
    )
}

/// Radius column; empty for models without a graph.
pub fn rho_field(config: &RunConfig) -> String {
    match config.kind {
        cgnp_core::npmodels::ModelKind::Cnp => String::new(),
        cgnp_core::npmodels::ModelKind::Cgnp => config.radius.to_string(),
    }
}

pub fn metrics_json(config: &RunConfig, m: &Metrics, data_sha256: &str) -> String {
    serde_json::json!({
        "model": config.kind.as_str(),
        "rho": match config.kind {
            cgnp_core::npmodels::ModelKind::Cnp => serde_json::Value::Null,
            cgnp_core::npmodels::ModelKind::Cgnp => config.radius.into(),
        },
        "nll_per_point": m.nll_per_point,
        "nll_per_episode": m.nll_per_episode,
        "mse": m.mse,
        "episode_count": m.episode_count,
        "data_sha256": data_sha256,
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use cgnp_core::gpgen::{EpisodeGenerator, EqKernelSpec, ProtocolConfig};

    fn some_episodes(n: usize) -> Vec<Episode> {
        let gen = EpisodeGenerator::new(
            ProtocolConfig {
                test_episodes: n,
                ..ProtocolConfig::desk_scale(4)
            },
            EqKernelSpec::default(),
        )
        .unwrap();
        gen.test_set().unwrap()
    }

    #[test]
    fn episodes_round_trip_exactly() {
        let eps = some_episodes(3);
        let bytes = encode_episodes(&eps);
        let back = decode_episodes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, eps);
        assert_eq!(encode_episodes(&back), bytes);
    }

    #[test]
    fn empty_and_malformed_episode_files() {
        assert!(matches!(
            decode_episodes(b"\n\n", Path::new("e")),
            Err(CliError::EmptyEpisodeFile(_))
        ));
        assert!(matches!(
            decode_episodes(b"{\"x_c\":[1]}\n", Path::new("e")),
            Err(CliError::Format { .. })
        ));
        let bad = b"{\"x_c\":[0.1],\"y_c\":[0.2,0.3],\"x_t\":[0.0],\"y_t\":[1.0]}\n";
        assert!(matches!(decode_episodes(bad, Path::new("e")), Err(CliError::Format { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = RunConfig::parse("model.latent_dim = 4\nmodel.radius = 0.5", &[]).unwrap();
        let mut model = Model::new(cfg.model_config()).unwrap();
        for leaf in model.params.leaves_mut() {
            for (i, v) in leaf.value.data_mut().iter_mut().enumerate() {
                *v += 0.1 * i as f64 + 1.0 / 3.0;
            }
        }
        model.params.batch_norm_mut("enc1.bn").unwrap().running_var[0] = 2.5;
        let bytes = encode_checkpoint(&cfg, &model);
        let (cfg2, model2) = decode_checkpoint(&bytes, Path::new("c")).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(model2, model);
        assert_eq!(encode_checkpoint(&cfg2, &model2), bytes);
        let ep = &some_episodes(1)[0];
        assert_eq!(model.predict(ep).unwrap(), model2.predict(ep).unwrap());
    }

    #[test]
    fn checkpoint_shape_mismatch_is_reported() {
        let cfg = RunConfig::parse("model.latent_dim = 4", &[]).unwrap();
        let model = Model::new(cfg.model_config()).unwrap();
        let bytes = encode_checkpoint(&cfg, &model);
        let mut file: CheckpointFile = serde_json::from_slice(&bytes).unwrap();
        file.config.insert("model.latent_dim".into(), "5".into());
        let bytes = serde_json::to_vec(&file).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes, Path::new("c")),
            Err(CliError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn sha_of_known_input() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
