//! Config-driven training runs, metric logging and parameter sweeps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::encoders::{EncoderParams, EncoderShape, RawViews};
use crate::error::{Error, Result};
use crate::harness::checkpoint::save_state;
use crate::harness::config::{DataSource, RunConfig};
use crate::harness::eval::{evaluate, EvalRecord};
use crate::harness::synthetic::{gen_synthetic, PairDataset};
use crate::numerics::Rng;
use crate::trainers::{TrainState, STREAM_ENCODER};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.nckp";

/// A validated config together with its data.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: RunConfig,
    pub data: PairDataset,
}

impl Experiment {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = match &cfg.data {
            DataSource::Synthetic(spec) => gen_synthetic(spec)?,
            DataSource::File(p) => PairDataset::load(p)?,
        };
        if cfg.trainer.batch_size > data.len() {
            return Err(Error::config(
                "batch_size",
                format!(
                    "{} exceeds the {} pairs in the dataset",
                    cfg.trainer.batch_size,
                    data.len()
                ),
            ));
        }
        Ok(Experiment { cfg, data })
    }

    pub fn raw(&self) -> RawViews<'_> {
        RawViews {
            image: &self.data.raw_image,
            text: &self.data.raw_text,
        }
    }

    /// Step-0 state for this config.
    pub fn fresh_state(&self) -> Result<TrainState> {
        let shape = EncoderShape {
            kind: self.cfg.encoder_kind,
            n: self.data.len(),
            raw_image: self.data.raw_image.cols(),
            raw_text: self.data.raw_text.cols(),
            hidden: self.cfg.encoder_hidden,
            dim: self.cfg.encoder_dim,
        };
        let enc = EncoderParams::init(shape, &mut Rng::with_stream(self.cfg.seed, STREAM_ENCODER));
        TrainState::new(&self.cfg.trainer, enc, self.data.len(), self.cfg.seed)
    }

    pub fn evaluate(&self, state: &TrainState, wall_ms: u64) -> Result<EvalRecord> {
        evaluate(state, &self.cfg.trainer, self.raw(), self.cfg.seed, wall_ms)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<EvalRecord>,
    pub state: TrainState,
}

fn is_eval_step(step: u64, every: u64, last: u64) -> bool {
    step.is_multiple_of(every) || step == last
}

/// Trains for `cfg.steps` steps, evaluating at step 0, every `eval_every`
/// steps and at the end. With `out` set, appends each record to
/// `metrics.jsonl` as it is produced and writes `checkpoint.nckp` at the end.
pub fn run_experiment(exp: &Experiment, out: Option<&Path>) -> Result<RunOutput> {
    let cfg = &exp.cfg;
    let start = Instant::now();
    let wall = || {
        if cfg.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    };
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?))
        }
        None => None,
    };
    let mut emit = |rec: EvalRecord, records: &mut Vec<EvalRecord>| -> Result<()> {
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Io(std::io::Error::other(e)))?;
            writeln!(w, "{line}")?;
            w.flush()?;
        }
        records.push(rec);
        Ok(())
    };
    let mut state = exp.fresh_state()?;
    let mut records = Vec::new();
    emit(exp.evaluate(&state, wall())?, &mut records)?;
    for _ in 0..cfg.steps {
        state.step(&cfg.trainer, exp.raw())?;
        if is_eval_step(state.step, cfg.eval_every, cfg.steps) {
            emit(exp.evaluate(&state, wall())?, &mut records)?;
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step != cfg.steps {
                save_state(&state, &dir.join(format!("checkpoint_{:08}.nckp", state.step)))?;
            }
        }
    }
    if let Some(dir) = out {
        save_state(&state, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(RunOutput { records, state })
}

/// Loads the config at `path` and runs it. The output directory is
/// `output.dir`, or `runs/<config stem>` next to the config file.
pub fn run_config_file(path: &Path) -> Result<RunOutput> {
    let cfg = RunConfig::load(path)?;
    let out = output_dir(&cfg, path);
    run_experiment(&Experiment::new(cfg)?, Some(&out))
}

pub fn output_dir(cfg: &RunConfig, config_path: &Path) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| {
        let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
        config_path.parent().unwrap_or(Path::new("")).join("runs").join(stem)
    })
}

/// One `--vary key=v1,v2,...` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        let Some((k, vs)) = s.split_once('=') else {
            return Err(Error::config(s, "expected key=v1,v2,..."));
        };
        let key = k.trim().to_string();
        let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).collect();
        if key.is_empty() || values.iter().any(String::is_empty) {
            return Err(Error::config(s, "expected key=v1,v2,..."));
        }
        Ok(SweepAxis { key, values })
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub run: usize,
    pub values: Vec<String>,
    pub last: EvalRecord,
}

/// Every combination of the axes, first axis varying slowest.
pub fn sweep_grid(axes: &[SweepAxis]) -> Vec<Vec<String>> {
    let mut grid = vec![Vec::new()];
    for axis in axes {
        grid = grid
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect();
    }
    grid
}

/// Runs every combination one after another. Run `k` writes into
/// `out_root/run_k`. Every combination is validated before the first run.
pub fn sweep(base_text: &str, base_dir: &Path, axes: &[SweepAxis], out_root: &Path) -> Result<Vec<SweepRow>> {
    for axis in axes {
        if axes.iter().filter(|a| a.key == axis.key).count() > 1 {
            return Err(Error::config(&axis.key, "axis given more than once"));
        }
    }
    let mut configs = Vec::new();
    for combo in sweep_grid(axes) {
        let mut cfg = RunConfig::parse(base_text, base_dir)?;
        for (axis, v) in axes.iter().zip(&combo) {
            cfg.set(&axis.key, v, base_dir)?;
        }
        cfg.validate()?;
        configs.push((combo, cfg));
    }
    let mut rows = Vec::new();
    for (run, (values, mut cfg)) in configs.into_iter().enumerate() {
        let dir = out_root.join(format!("run_{run}"));
        cfg.output_dir = Some(dir.clone());
        let out = run_experiment(&Experiment::new(cfg)?, Some(&dir))?;
        let last = out.records.last().cloned().expect("step 0 is always evaluated");
        rows.push(SweepRow { run, values, last });
    }
    Ok(rows)
}

/// Summary table with one header row and one row per run.
pub fn write_sweep_csv<W: Write>(axes: &[SweepAxis], rows: &[SweepRow], w: W) -> Result<()> {
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["run".to_string()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.extend(
        [
            "step",
            "samples_seen",
            "gcl_value_on_eval_pool",
            "recall@1",
            "recall@5",
            "estimation_error",
            "tau",
        ]
        .map(String::from),
    );
    wr.write_record(&header).map_err(to_io)?;
    for r in rows {
        let mut rec = vec![r.run.to_string()];
        rec.extend(r.values.iter().cloned());
        let l = &r.last;
        rec.push(l.step.to_string());
        rec.push(l.samples_seen.to_string());
        rec.push(l.gcl_value_on_eval_pool.to_string());
        rec.push(l.recall_at_1.to_string());
        rec.push(l.recall_at_5.to_string());
        rec.push(l.estimation_error.map(|e| e.to_string()).unwrap_or_default());
        rec.push(l.tau.to_string());
        wr.write_record(&rec).map_err(to_io)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "
data.n = 48
data.k = 6
data.d_latent = 4
data.d_raw_image = 6
data.d_raw_text = 5
encoder.dim = 4
batch_size = 8
eval_every = 3
npn.m = 8
npn.t_r = 4
npn.t_u = 2
";

    fn small(extra: &str) -> RunConfig {
        RunConfig::parse(&format!("{SMALL}{extra}"), Path::new(".")).unwrap()
    }

    #[test]
    fn log_steps_and_zero_steps() {
        let exp = Experiment::new(small("method = neuclip\nsteps = 7")).unwrap();
        let out = run_experiment(&exp, None).unwrap();
        let steps: Vec<u64> = out.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 3, 6, 7]);
        let exp = Experiment::new(small("steps = 0")).unwrap();
        let out = run_experiment(&exp, None).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].step, 0);
    }

    #[test]
    fn files_are_written_and_reruns_match_bytewise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small("method = fastclip\nsteps = 7\ncheckpoint_every = 5");
        let exp = Experiment::new(cfg).unwrap();
        run_experiment(&exp, Some(&dir.path().join("a"))).unwrap();
        run_experiment(&exp, Some(&dir.path().join("b"))).unwrap();
        let a = std::fs::read(dir.path().join("a").join(METRICS_FILE)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(METRICS_FILE)).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        let mut prev = None;
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let s = v["step"].as_u64().unwrap();
            assert!(prev.is_none_or(|p| s > p));
            prev = Some(s);
        }
        assert!(dir.path().join("a").join(CHECKPOINT_FILE).exists());
        assert!(dir.path().join("a").join("checkpoint_00000005.nckp").exists());
    }

    #[test]
    fn batch_larger_than_file_dataset_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_synthetic(&crate::harness::synthetic::SyntheticSpec {
            n: 10,
            k: 2,
            ..Default::default()
        })
        .unwrap();
        let p = dir.path().join("d.nckp");
        data.save(&p).unwrap();
        let cfg = RunConfig::parse("data.path = d.nckp\nbatch_size = 16", dir.path()).unwrap();
        match Experiment::new(cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "batch_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sweep_grid_and_csv() {
        let axes = vec![
            SweepAxis::parse("method=minibatch,fastclip").unwrap(),
            SweepAxis::parse("seed=1,2,3").unwrap(),
        ];
        let grid = sweep_grid(&axes);
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[1], vec!["minibatch".to_string(), "2".to_string()]);
        let dir = tempfile::tempdir().unwrap();
        let text = format!("{SMALL}steps = 2\n");
        let axes = vec![SweepAxis::parse("method=minibatch,fastclip").unwrap()];
        let rows = sweep(&text, dir.path(), &axes, dir.path()).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&axes, &rows, &mut buf).unwrap();
        let csv = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("run,method,step,"));
        assert!(lines[1].starts_with("0,minibatch,2,"));
    }

    #[test]
    fn sweep_rejects_bad_axes_before_running() {
        let dir = tempfile::tempdir().unwrap();
        let axes = vec![SweepAxis::parse("nope=1,2").unwrap()];
        assert!(sweep(SMALL, dir.path(), &axes, dir.path()).is_err());
        assert!(!dir.path().join("run_0").exists());
        assert!(SweepAxis::parse("method").is_err());
        assert!(SweepAxis::parse("method=a,,b").is_err());
    }
}
