//! Executes one configured experiment and writes its artifacts: a result
//! JSON, CSV curves, and a manifest with content hashes. Monte Carlo
//! experiments are cached under `<out>/.cache/<config hash>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{EventConfig, ExperimentConfig, Resolved, RunConfig, TargetConfig};
use crate::error::{FadeError, Result};
use crate::fading_memory::Segment;
use crate::ldp::{ldp_slope, EventKind, EventSpec, McOptions, StartSpec};
use crate::ldp::variational_check;
use crate::model::dissipativity_report;
use crate::pullback::{pullback_solve, stationarity_test, NormalReference, StationarityOptions};
use crate::rate::{minimize_rate, quasipotential, HorizonSweep, RateProblem, StartMode, Target};
use crate::simulate::{integrate_sfde, integrate_skeleton, SimConfig, StreamNoise};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const REFUSED: i32 = 3;
    pub const DIVERGED: i32 = 4;
    pub const INFEASIBLE: i32 = 5;
}

pub fn exit_code(err: &FadeError) -> i32 {
    match err {
        FadeError::Config(_)
        | FadeError::InvalidParams(_)
        | FadeError::InvalidSegment(_)
        | FadeError::InvalidMeasure(_)
        | FadeError::DimensionMismatch { .. }
        | FadeError::DivergentMoment { .. }
        | FadeError::NoWindow { .. }
        | FadeError::OutOfRange { .. }
        | FadeError::Unsupported(_) => exit::CONFIG,
        FadeError::UnstableModel { .. } => exit::REFUSED,
        FadeError::Diverged { .. }
        | FadeError::StartDiverged { .. }
        | FadeError::WeightOverflow { .. }
        | FadeError::SingularDiffusion { .. } => exit::DIVERGED,
        FadeError::Infeasible(_) => exit::INFEASIBLE,
        FadeError::Insufficient(_) | FadeError::Io(_) => exit::FAILURE,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_s: f64,
    pub cache_hit: bool,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    /// `exit::OK`, or `exit::INFEASIBLE` when a rate problem had no
    /// feasible control (artifacts are still written).
    pub exit_code: i32,
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("results serialize");
    s.push('\n');
    s.into_bytes()
}

type Artifacts = BTreeMap<String, Vec<u8>>;

fn csv_bytes<F: FnOnce(&mut Vec<u8>) -> Result<()>>(f: F) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn target_of(t: &TargetConfig, res: &Resolved, t_end: f64) -> Result<Target> {
    Ok(match t {
        TargetConfig::Point { y } => Target::Point(y.clone()),
        TargetConfig::ConstantSegment { y } => Target::Segment(Segment::constant(res.params, t_end, y)?),
    })
}

/// Runs the experiment, returning the artifacts and whether the result is
/// infeasible.
fn execute(cfg: &RunConfig, res: Option<&Resolved>) -> Result<(Artifacts, bool)> {
    let mut files = Artifacts::new();
    let seed = cfg.seed;
    // the variational check works on Brownian motion alone
    if let ExperimentConfig::VariationalCheck { f, t, k, n_mc } = &cfg.experiment {
        let rep = variational_check(f, *t, *k, *n_mc, seed)?;
        files.insert("result.json".into(), json(&rep));
        return Ok((files, false));
    }
    let res = res.ok_or_else(|| FadeError::Config("missing [model] block (or scenario)".into()))?;
    let h = res.params.h;
    let model = &res.model;
    let mut infeasible = false;
    match &cfg.experiment {
        ExperimentConfig::CheckModel { eps, n_samples } => {
            let eps = eps.unwrap_or(res.default_eps);
            let rep = dissipativity_report(model, res.params.r, eps, *n_samples, seed)?;
            files.insert("result.json".into(), json(&rep));
        }
        ExperimentConfig::Simulate {
            eps,
            t0,
            t_end,
            scheme,
            n_paths,
        } => {
            let eps = eps.unwrap_or(res.default_eps);
            let sim = SimConfig::new(h, *t0, *t_end).with_scheme(*scheme).with_seed(seed);
            let mut finals = Vec::new();
            for i in 0..(*n_paths).max(1) {
                let path = if eps == 0.0 {
                    integrate_skeleton(model, &res.initial, None, &sim)?
                } else {
                    let noise = StreamNoise::new(h, model.m(), seed, i as u64)?;
                    integrate_sfde(model, &res.initial, eps, &sim, &noise)?
                };
                finals.push(path.last().to_vec());
                files.insert(format!("path_{i}.csv"), csv_bytes(|b| path.write_csv(b))?);
                if eps == 0.0 {
                    break;
                }
            }
            #[derive(Serialize)]
            struct Out {
                eps: f64,
                t0: f64,
                t_end: f64,
                h: f64,
                final_states: Vec<Vec<f64>>,
            }
            files.insert(
                "result.json".into(),
                json(&Out {
                    eps,
                    t0: *t0,
                    t_end: *t_end,
                    h,
                    final_states: finals,
                }),
            );
        }
        ExperimentConfig::Pullback {
            eps,
            window,
            n_list,
            scheme,
        } => {
            let eps = eps.unwrap_or(res.default_eps);
            let sim = SimConfig::new(h, window[0], window[1]).with_scheme(*scheme);
            let run = pullback_solve(model, &res.initial, eps, (window[0], window[1]), n_list, &sim, seed)?;
            files.insert("result.json".into(), json(&run.summary()));
            files.insert("diffs.csv".into(), csv_bytes(|b| run.write_diffs_csv(b))?);
            files.insert("limit_path.csv".into(), csv_bytes(|b| run.limit_path.write_csv(b))?);
        }
        ExperimentConfig::Stationarity {
            eps,
            n_burn,
            times,
            n_replicas,
            alpha,
            reference,
        } => {
            let eps = eps.unwrap_or(res.default_eps);
            let mut opts = StationarityOptions::new(*n_burn, times.clone(), *n_replicas, *alpha, seed);
            opts.reference = reference.map(|r| NormalReference {
                mean: vec![r.mean; model.d()],
                var: vec![r.var; model.d()],
            });
            let sim = SimConfig::new(h, 0.0, 1.0);
            let rep = stationarity_test(model, &res.initial, eps, &sim, &opts)?;
            files.insert("result.json".into(), json(&rep));
        }
        ExperimentConfig::Rate {
            t0,
            t_end,
            target,
            h_v,
            optimizer,
        } => {
            let problem = RateProblem::new(
                model,
                StartMode::FromInitial {
                    t0: *t0,
                    xi: res.initial.clone(),
                },
                target_of(target, res, *t_end)?,
                *t_end,
                h,
                *h_v,
            )?
            .with_options(optimizer.options(seed));
            let out = minimize_rate(&problem)?;
            infeasible = !out.feasible;
            files.insert("result.json".into(), json(&out));
            files.insert("control.csv".into(), csv_bytes(|b| out.control.write_csv(b))?);
            if let Some(p) = &out.path {
                files.insert("path.csv".into(), csv_bytes(|b| p.write_csv(b))?);
            }
        }
        ExperimentConfig::Quasipotential {
            target,
            t_list,
            depth,
            h_v,
            optimizer,
        } => {
            let sweep = HorizonSweep {
                t_list: t_list.clone(),
                depth: *depth,
                h,
                h_v: *h_v,
                scheme: Default::default(),
                options: optimizer.options(seed),
            };
            let t_last = t_list.last().copied().unwrap_or(0.0);
            let q = quasipotential(model, &res.initial, target_of(target, res, t_last)?, &sweep)?;
            infeasible = q.value.is_none();
            files.insert("result.json".into(), json(&q));
            let mut curve = String::from("t,value,mismatch,feasible\n");
            for p in &q.curve {
                curve.push_str(&format!("{},{},{},{}\n", p.t, p.value, p.mismatch, p.feasible));
            }
            files.insert("curve.csv".into(), curve.into_bytes());
        }
        ExperimentConfig::LdpSlope {
            event,
            eps_list,
            n_per_eps,
            h_v,
            optimizer,
        } => {
            let (spec, y, t_end) = match event {
                EventConfig::TerminalBall { center, radius, time } => (
                    EventSpec::new(EventKind::TerminalBall {
                        center: center.clone(),
                        radius: *radius,
                        time: *time,
                    }),
                    center.clone(),
                    *time,
                ),
                EventConfig::TerminalExceed { threshold, time } => {
                    let mut y = vec![0.0; model.d()];
                    y[0] = *threshold;
                    (
                        EventSpec::new(EventKind::TerminalExceed {
                            threshold: *threshold,
                            time: *time,
                        }),
                        y,
                        *time,
                    )
                }
            };
            let xi = res.initial.clone();
            let problem = RateProblem::new(
                model,
                StartMode::FromInitial { t0: 0.0, xi: xi.clone() },
                Target::Point(y),
                t_end,
                h,
                *h_v,
            )?
            .with_options(optimizer.options(seed));
            let rate = minimize_rate(&problem)?;
            if !rate.feasible {
                files.insert("rate.json".into(), json(&rate));
                return Ok((files, true));
            }
            let start = StartSpec::FromInitial { t0: 0.0, xi };
            let rep = ldp_slope(model, &start, &spec, eps_list, *n_per_eps, &rate, &McOptions::new(h, seed))?;
            files.insert("rate.json".into(), json(&rate));
            files.insert("result.json".into(), json(&rep));
            files.insert("slope.csv".into(), csv_bytes(|b| rep.write_csv(b))?);
        }
        ExperimentConfig::VariationalCheck { .. } => unreachable!("handled above"),
    }
    Ok((files, infeasible))
}

#[derive(Serialize, serde::Deserialize)]
struct CacheEntry {
    infeasible: bool,
    files: BTreeMap<String, String>,
}

/// Runs `cfg`, writing artifacts to `out_dir` (or `cfg.output`, or `out`).
pub fn run(cfg: &RunConfig, out_dir: Option<&Path>, use_cache: bool) -> Result<RunOutcome> {
    let started = Instant::now();
    let out_dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let resolved = match cfg.experiment {
        ExperimentConfig::VariationalCheck { .. } if cfg.model.is_none() && cfg.scenario.is_none() => None,
        _ => Some(cfg.resolve()?),
    };
    let hash = cfg.hash();
    let cacheable = use_cache && cfg.cache && cfg.experiment.is_expensive();
    let cache_path = out_dir.join(".cache").join(format!("{hash}.json"));
    let mut cache_hit = false;
    let cached: Option<CacheEntry> = if cacheable && cache_path.exists() {
        fs::read(&cache_path).ok().and_then(|b| serde_json::from_slice(&b).ok())
    } else {
        None
    };
    let (files, infeasible) = match cached {
        Some(entry) => {
            cache_hit = true;
            let files = entry.files.into_iter().map(|(k, v)| (k, v.into_bytes())).collect();
            (files, entry.infeasible)
        }
        None => {
            let (files, infeasible) = execute(cfg, resolved.as_ref())?;
            if cacheable {
                let entry = CacheEntry {
                    infeasible,
                    files: files
                        .iter()
                        .map(|(k, v)| (k.clone(), String::from_utf8_lossy(v).into_owned()))
                        .collect(),
                };
                write_atomic(&cache_path, &json(&entry))?;
            }
            (files, infeasible)
        }
    };
    fs::create_dir_all(&out_dir)?;
    let mut entries = Vec::with_capacity(files.len() + 1);
    for (name, bytes) in &files {
        write_atomic(&out_dir.join(name), bytes)?;
        entries.push(FileEntry {
            name: name.clone(),
            sha256: sha_hex(bytes),
            bytes: bytes.len(),
        });
    }
    let config_text = cfg.to_toml()?.into_bytes();
    write_atomic(&out_dir.join("config.toml"), &config_text)?;
    entries.push(FileEntry {
        name: "config.toml".into(),
        sha256: sha_hex(&config_text),
        bytes: config_text.len(),
    });
    let manifest = Manifest {
        tool: "fadeldp".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        experiment: cfg.experiment.kind().into(),
        config_hash: hash,
        seed: cfg.seed,
        wall_time_s: started.elapsed().as_secs_f64(),
        cache_hit,
        files: entries,
    };
    write_atomic(&out_dir.join("manifest.json"), &json(&manifest))?;
    Ok(RunOutcome {
        out_dir,
        manifest,
        exit_code: if infeasible { exit::INFEASIBLE } else { exit::OK },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::from_toml(text).unwrap()
    }

    #[test]
    fn check_model_on_delay_ou() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("scenario = \"delay-ou\"\n[experiment]\nkind = \"check-model\"\nn_samples = 200\n");
        let out = run(&c, Some(dir.path()), true).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("result.json")).unwrap()).unwrap();
        assert!((v["margin"].as_f64().unwrap() - 2.889).abs() < 1e-3);
        assert_eq!(v["stable"], true);
        assert_eq!(out.exit_code, exit::OK);
        assert!(out.manifest.files.iter().any(|f| f.name == "result.json"));
    }

    #[test]
    fn deterministic_simulation_is_byte_identical() {
        let text = "scenario = \"delay-ou\"\n[experiment]\nkind = \"simulate\"\neps = 0.0\nt_end = 1.0\n";
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run(&cfg(text), Some(a.path()), true).unwrap();
        run(&cfg(text), Some(b.path()), true).unwrap();
        assert_eq!(
            fs::read(a.path().join("path_0.csv")).unwrap(),
            fs::read(b.path().join("path_0.csv")).unwrap()
        );
    }

    #[test]
    fn second_run_hits_cache() {
        let text = "seed = 5\nscenario = \"ou\"\n[experiment]\nkind = \"stationarity\"\nn_burn = 16.0\ntimes = [0.0, 0.5]\nn_replicas = 200\n";
        let dir = tempfile::tempdir().unwrap();
        let first = run(&cfg(text), Some(dir.path()), true).unwrap();
        let r1 = fs::read(dir.path().join("result.json")).unwrap();
        let second = run(&cfg(text), Some(dir.path()), true).unwrap();
        assert!(!first.manifest.cache_hit && second.manifest.cache_hit);
        assert_eq!(r1, fs::read(dir.path().join("result.json")).unwrap());
    }

    #[test]
    fn unstable_model_maps_to_refusal() {
        let text = r#"
[model]
family = "scalar"
a = 0.1
b = 2.0
sigma0 = 1.0
mu1 = { atoms = [[-1.0, 1.0]] }
mu2 = { atoms = [[0.0, 1.0]] }
[memory]
r = 1.0
h = 0.01
window = 1.0
tail_tol = 1e-8
[experiment]
kind = "simulate"
eps = 0.1
t_end = 1.0
"#;
        let dir = tempfile::tempdir().unwrap();
        let err = run(&cfg(text), Some(dir.path()), true).unwrap_err();
        assert_eq!(exit_code(&err), exit::REFUSED);
    }
}
