//! Run directories: config snapshot, metrics log, checkpoints, reports and
//! ablation grids.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml            resolved configuration
//! dataset.tsv            reference sets the run trained on
//! metrics.jsonl          one record per eval point
//! plot.tsv               the same metrics as columns
//! rewards.tsv            per-sample reward trace, when enabled
//! checkpoints/step-N.json
//! eval/step-N.txt        report written during training
//! report.txt             report at the final step
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use toml::Value;

use crate::config::{resolve, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{make_report, plot_table, ContextProbe, EvalReport};
use crate::networks::Checkpoint;
use crate::par::Execution;
use crate::trainer::{train, MetricRecord, RunState, TrainHooks, TrainSetup};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDirectory {
    pub path: PathBuf,
}

impl RunDirectory {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path.join("checkpoints"))?;
        fs::create_dir_all(path.join("eval"))?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let dir = Self {
            path: path.to_path_buf(),
        };
        if !dir.config_path().is_file() {
            return Err(Error::Checkpoint(format!("{} is not a run directory", path.display())));
        }
        Ok(dir)
    }

    pub fn config_path(&self) -> PathBuf {
        self.path.join("config.toml")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path.join("metrics.jsonl")
    }

    pub fn plot_path(&self) -> PathBuf {
        self.path.join("plot.tsv")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.path.join("dataset.tsv")
    }

    pub fn report_path(&self) -> PathBuf {
        self.path.join("report.txt")
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.path.join("checkpoints").join(format!("step-{step:08}.json"))
    }

    pub fn eval_path(&self, step: usize, seed: Option<u64>) -> PathBuf {
        let name = match seed {
            Some(s) => format!("step-{step:08}-seed-{s}.txt"),
            None => format!("step-{step:08}.txt"),
        };
        self.path.join("eval").join(name)
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        resolve(Some(&fs::read_to_string(self.config_path())?), &[])
    }

    /// Steps with a saved checkpoint, ascending.
    pub fn checkpoints(&self) -> Result<Vec<usize>> {
        let mut steps = Vec::new();
        for entry in fs::read_dir(self.path.join("checkpoints"))? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(n) = name.strip_prefix("step-").and_then(|s| s.strip_suffix(".json")) {
                if let Ok(step) = n.parse() {
                    steps.push(step);
                }
            }
        }
        steps.sort_unstable();
        Ok(steps)
    }

    pub fn load_checkpoint(&self, step: usize) -> Result<Checkpoint> {
        let path = self.checkpoint_path(step);
        let text = fs::read_to_string(&path)
            .map_err(|_| Error::Checkpoint(format!("no checkpoint at step {step} ({})", path.display())))?;
        Checkpoint::from_json(&text)
    }

    pub fn read_metrics(&self) -> Result<Vec<MetricRecord>> {
        fs::read_to_string(self.metrics_path())?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

struct RunHooks<'a> {
    dir: &'a RunDirectory,
    probe: &'a ContextProbe,
    seed: u64,
    per_condition: usize,
    exec: Execution,
    last: Option<EvalReport>,
}

impl TrainHooks for RunHooks<'_> {
    fn on_eval(&mut self, state: &RunState, setup: &TrainSetup) -> Result<std::collections::BTreeMap<String, f64>> {
        let ckpt = Checkpoint::capture(state.step as u64, &state.policy, state.critic.as_ref(), &state.rng);
        fs::write(self.dir.checkpoint_path(state.step), ckpt.to_json()?)?;
        let report = make_report(
            &state.policy,
            setup,
            self.probe,
            self.seed,
            self.per_condition,
            self.exec,
        )?;
        fs::write(self.dir.eval_path(state.step, None), report.to_text())?;
        let mut values = std::collections::BTreeMap::new();
        values.insert("image_alignment".to_string(), report.image_alignment);
        values.insert("condition_alignment".to_string(), report.condition_alignment);
        self.last = Some(report);
        Ok(values)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: RunDirectory,
    pub state: RunState,
    pub report: EvalReport,
}

/// Trains per `cfg` and writes a complete run directory at `out`.
pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = RunDirectory::create(out)?;
    fs::write(dir.config_path(), cfg.to_toml()?)?;
    let setup = cfg.setup()?;
    fs::write(dir.dataset_path(), setup.dataset.dump())?;
    let probe = cfg.probe(&setup.dataset)?;
    let mut hooks = RunHooks {
        dir: &dir,
        probe: &probe,
        seed: cfg.eval_seed(),
        per_condition: cfg.eval.samples_per_condition,
        exec: cfg.trainer.execution,
        last: None,
    };
    let state = train(&cfg.trainer, &setup, &mut hooks)?;
    let report = hooks.last.take().expect("an eval point always follows the last step");

    let mut metrics = String::new();
    for m in &state.metrics {
        metrics.push_str(&serde_json::to_string(m)?);
        metrics.push('\n');
    }
    fs::write(dir.metrics_path(), metrics)?;
    fs::write(dir.plot_path(), plot_table(&state.metrics))?;
    if cfg.trainer.record_rewards {
        let mut trace = String::from("step\tt\tkind\tvalue\n");
        for r in &state.reward_trace {
            let _ = writeln!(trace, "{}\t{}\t{}\t{:?}", r.step, r.t, r.kind, r.value);
        }
        fs::write(dir.path.join("rewards.tsv"), trace)?;
    }
    fs::write(dir.report_path(), report.to_text())?;
    Ok(RunOutcome { dir, state, report })
}

/// Evaluates a saved checkpoint (the latest when `step` is `None`) and
/// writes the report plus a per-concept column file next to it.
pub fn eval_run(path: &Path, step: Option<usize>, seed: Option<u64>) -> Result<(PathBuf, EvalReport)> {
    let dir = RunDirectory::open(path)?;
    let cfg = dir.load_config()?;
    let step = match step {
        Some(s) => s,
        None => *dir
            .checkpoints()?
            .last()
            .ok_or_else(|| Error::Checkpoint(format!("no checkpoints in {}", path.display())))?,
    };
    let ckpt = dir.load_checkpoint(step)?;
    let (policy, _) = ckpt.restore()?;
    let setup = cfg.setup()?;
    let probe = cfg.probe(&setup.dataset)?;
    let seed = seed.unwrap_or(cfg.eval_seed());
    let report = make_report(
        &policy,
        &setup,
        &probe,
        seed,
        cfg.eval.samples_per_condition,
        cfg.trainer.execution,
    )?;
    let out = dir.eval_path(step, Some(seed));
    fs::write(&out, report.to_text())?;
    let mut table = String::from("concept\timage_alignment\tcondition_alignment\n");
    for (c, s) in &report.per_concept {
        let _ = writeln!(table, "{c}\t{:?}\t{:?}", s.image_alignment, s.condition_alignment);
    }
    fs::write(out.with_extension("tsv"), table)?;
    Ok((out, report))
}

/// One ablation axis: a config key and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<Value>,
}

/// Parses `key=v1,v2,...`. Commas inside brackets or quotes do not split.
pub fn parse_grid(spec: &str) -> Result<GridAxis> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config("grid", format!("`{spec}` must have the form key=v1,v2")))?;
    let mut parts = Vec::new();
    let (mut depth, mut quoted, mut cur) = (0i32, false, String::new());
    for ch in raw.chars() {
        match ch {
            '"' => quoted = !quoted,
            '[' if !quoted => depth += 1,
            ']' if !quoted => depth -= 1,
            ',' if !quoted && depth == 0 => {
                parts.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    parts.push(cur);
    let values: Vec<Value> = parts
        .iter()
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(crate::config::parse_literal)
        .collect();
    if values.is_empty() {
        return Err(Error::config(key.trim(), "grid axis has no values"));
    }
    Ok(GridAxis {
        key: key.trim().to_string(),
        values,
    })
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub dir: PathBuf,
    pub assignment: Vec<(String, Value)>,
    pub report: EvalReport,
    pub final_metrics: MetricRecord,
}

/// Every combination of grid values as override lists, in row-major order.
pub fn grid_cells(grid: &[GridAxis]) -> Vec<Vec<(String, Value)>> {
    let mut cells: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for axis in grid {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for cell in &cells {
            for v in &axis.values {
                let mut c = cell.clone();
                c.push((axis.key.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    cells
}

/// Runs the Cartesian product of `grid` over the base configuration, one
/// run directory per cell under `out`, and writes `ablation.tsv`.
pub fn ablate(
    file_text: Option<&str>,
    overrides: &[(String, Value)],
    grid: &[GridAxis],
    out: &Path,
    exec: Execution,
) -> Result<Vec<CellResult>> {
    if grid.is_empty() {
        return Err(Error::config("grid", "ablation needs at least one grid axis"));
    }
    let cells = grid_cells(grid);
    let configs = cells
        .iter()
        .map(|cell| {
            let mut all = overrides.to_vec();
            all.extend(cell.iter().cloned());
            resolve(file_text, &all)
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let results = exec.map(configs.len(), |i| -> Result<CellResult> {
        let dir = out.join(format!("cell-{i:03}"));
        let outcome = train_run(&configs[i], &dir)?;
        Ok(CellResult {
            dir,
            assignment: cells[i].clone(),
            report: outcome.report,
            final_metrics: outcome.state.metrics.last().cloned().expect("initial record"),
        })
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut table = String::from("cell");
    for axis in grid {
        let _ = write!(table, "\t{}", axis.key);
    }
    table.push_str("\timage_alignment\tcondition_alignment\trecon_loss\tcritic_loss\n");
    for r in &results {
        let _ = write!(table, "{}", r.dir.file_name().unwrap_or_default().to_string_lossy());
        for (_, v) in &r.assignment {
            let _ = write!(table, "\t{v}");
        }
        let metric = |k: &str| {
            r.final_metrics
                .values
                .get(k)
                .map(|v| format!("{v:?}"))
                .unwrap_or_else(|| "nan".into())
        };
        let _ = writeln!(
            table,
            "\t{:?}\t{:?}\t{}\t{}",
            r.report.image_alignment,
            r.report.condition_alignment,
            metric("recon_loss"),
            metric("critic_loss")
        );
    }
    fs::write(out.join("ablation.tsv"), table)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let a = parse_grid("trainer.reward.lambda=0.1,1").unwrap();
        assert_eq!(a.key, "trainer.reward.lambda");
        assert_eq!(a.values, vec![Value::Float(0.1), Value::Integer(1)]);
        let b = parse_grid("policy.hidden=[8,8],[16]").unwrap();
        assert_eq!(b.values.len(), 2);
        assert!(parse_grid("trainer.steps=").is_err());
        assert!(parse_grid("nokey").is_err());
    }

    #[test]
    fn cells_are_cartesian() {
        let g = vec![parse_grid("a=1,2").unwrap(), parse_grid("b=x,y,z").unwrap()];
        let cells = grid_cells(&g);
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1][1].1, Value::String("y".into()));
    }

    #[test]
    fn empty_grid_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ablate(None, &[], &[], dir.path(), Execution::Sequential).is_err());
    }
}
