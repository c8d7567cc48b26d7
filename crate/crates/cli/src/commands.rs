use std::collections::BTreeMap;
use std::sync::Arc;

use dlm_core::layout::Stage;
use dlm_core::model::SyntheticScript;
use dlm_core::{
    build_block_layout, build_spec_layout, decode, estimate_speedup, trajectory_costs,
    trajectory_metrics, Bound, Candidate, CandidateSet, HardwareProfile, MetricsReport, Model,
    ModelConfig, Phase, RunConfig, ScriptedModel, ScriptedSchedule, SpecSet, Strategy, ToyModel,
    Trajectory,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::io::{read_json, read_tasks, OutDir, TaskRecord};
use crate::{DecodeArgs, GenTasksArgs, MaskArgs, ModelKind};

enum Models {
    Shared(Arc<dyn Model>),
    /// One synthetic script per task, keyed by its EOS offset.
    Synthetic { cfg: ModelConfig, seed: u64 },
}

impl Models {
    fn for_task(&self, task: &TaskRecord) -> CliResult<Arc<dyn Model>> {
        match self {
            Models::Shared(m) => Ok(Arc::clone(m)),
            Models::Synthetic { cfg, seed } => {
                let script = SyntheticScript {
                    eos_offset: task.eos_offset,
                    token_seed: *seed,
                    ..Default::default()
                };
                Ok(Arc::new(ScriptedModel::synthetic(cfg.clone(), script)?))
            }
        }
    }
}

struct Setup {
    cfg: ModelConfig,
    models: Models,
    model_kind: &'static str,
    base: RunConfig,
    profile: HardwareProfile,
    tasks: Vec<TaskRecord>,
    out: OutDir,
    pool: rayon::ThreadPool,
}

fn load_model_config(path: Option<&std::path::PathBuf>) -> CliResult<ModelConfig> {
    match path {
        Some(p) => {
            let cfg: ModelConfig = read_json(p)?;
            cfg.validate()?;
            Ok(cfg)
        }
        None => Ok(ModelConfig::toy()),
    }
}

fn setup(args: &DecodeArgs, strategy: Option<Strategy>) -> CliResult<Setup> {
    let cfg = load_model_config(args.model_config.as_ref())?;
    let mut base = match &args.run_config {
        Some(p) => read_json::<RunConfig>(p)?,
        None => RunConfig::new(Strategy::Fast, 256, 32),
    };
    if let Some(s) = strategy {
        base.strategy = s;
    }
    if let Some(v) = args.gen_length {
        base.gen_length = v;
    }
    if let Some(v) = args.block_size {
        base.block_size = v;
    }
    if let Some(v) = args.accept_threshold {
        base.accept_threshold = v;
    }
    if let Some(v) = args.truncate_threshold {
        base.truncate_threshold = v;
    }
    if let Some(v) = args.stage2_min_decoded {
        base.stage2_min_decoded = Some(v);
    }
    if let Some(v) = args.seed {
        base.seed = v;
    }
    if let Some(v) = args.tau_steps {
        base.tau_steps = v;
    }
    if args.no_speculation {
        base.speculative = false;
    }
    base.validate()?;

    let profile = match &args.profile {
        Some(p) => {
            let prof: HardwareProfile = read_json(p)?;
            prof.validate()?;
            prof
        }
        None => HardwareProfile::default(),
    };
    let (models, model_kind) = match args.model {
        ModelKind::Toy => {
            if args.script.is_some() {
                return Err(CliError::Usage("--script requires --model scripted".into()));
            }
            (Models::Shared(Arc::new(ToyModel::new(cfg.clone())?)), "toy")
        }
        ModelKind::Scripted => match &args.script {
            Some(p) => {
                let schedule: ScriptedSchedule = read_json(p)?;
                (
                    Models::Shared(Arc::new(ScriptedModel::from_schedule(cfg.clone(), schedule)?)),
                    "scripted",
                )
            }
            None => (
                Models::Synthetic {
                    cfg: cfg.clone(),
                    seed: base.seed,
                },
                "synthetic",
            ),
        },
    };
    let tasks = read_tasks(&args.tasks)?;
    for t in &tasks {
        if let Some(&bad) = t
            .prompt_tokens
            .iter()
            .find(|&&tok| tok as usize >= cfg.vocab_size || tok == cfg.mask_token_id)
        {
            return Err(CliError::Config(format!(
                "task {}: prompt token {bad} is out of vocabulary or the mask token",
                t.id
            )));
        }
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = args.jobs {
        pool = pool.num_threads(j);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let out = OutDir::create(&args.out)?;
    Ok(Setup {
        cfg,
        models,
        model_kind,
        base,
        profile,
        tasks,
        out,
        pool,
    })
}

impl Setup {
    /// Decodes every task in parallel; results keep task order.
    fn decode_all(&self, config: &RunConfig) -> CliResult<Vec<Trajectory>> {
        self.pool.install(|| {
            self.tasks
                .par_iter()
                .map(|task| {
                    let model = self.models.for_task(task)?;
                    decode(model.as_ref(), &task.prompt_tokens, config).map_err(|e| CliError::Decode {
                        task: task.id.clone(),
                        msg: format!("{} decoding failed: {e}", config.strategy.as_str()),
                    })
                })
                .collect()
        })
    }

    fn metrics(&self, trajs: &[Trajectory]) -> CliResult<Vec<MetricsReport>> {
        trajs
            .iter()
            .map(|t| Ok(trajectory_metrics(t, &self.cfg, &self.profile)?))
            .collect()
    }

    fn write_costs(&self, dir: &str, trajs: &[Trajectory]) -> CliResult<()> {
        for (task, t) in self.tasks.iter().zip(trajs) {
            let costs = trajectory_costs(t, &self.cfg, &self.profile)?;
            self.out.write_csv(&format!("{dir}/{}.csv", task.id), &costs)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct ModelInfo<'a> {
    kind: &'a str,
    config: &'a ModelConfig,
}

#[derive(Serialize)]
struct TaskSummary<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'a str>,
    metrics: &'a MetricsReport,
}

#[derive(Serialize, Default)]
struct Aggregate {
    tasks: usize,
    nfe: usize,
    eff_nfe: usize,
    prefill_steps: usize,
    decode_steps: usize,
    total_jumps: usize,
    tokens_generated: usize,
    truncations: usize,
    total_est_time_s: f64,
    prefill_time_frac: f64,
}

fn aggregate(reports: &[MetricsReport]) -> Aggregate {
    let mut a = Aggregate {
        tasks: reports.len(),
        ..Default::default()
    };
    let mut prefill = 0.0;
    for r in reports {
        a.nfe += r.nfe;
        a.eff_nfe += r.eff_nfe;
        a.prefill_steps += r.prefill_steps;
        a.decode_steps += r.decode_steps;
        a.total_jumps += r.total_jumps;
        a.tokens_generated += r.tokens_generated;
        a.truncations += r.truncations.len();
        a.total_est_time_s += r.total_est_time_s;
        prefill += r.prefill_est_time_s;
    }
    if a.total_est_time_s > 0.0 {
        a.prefill_time_frac = prefill / a.total_est_time_s;
    }
    a
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    id: &'a str,
    nfe: usize,
    eff_nfe: usize,
    prefill_steps: usize,
    decode_steps: usize,
    total_jumps: usize,
    tokens_generated: usize,
    initial_gen_length: usize,
    final_gen_length: usize,
    truncations: usize,
    prefill_time_frac: f64,
    total_est_time_s: f64,
}

pub fn run(args: &DecodeArgs, strategy: Option<Strategy>) -> CliResult<()> {
    let s = setup(args, strategy)?;
    let trajs = s.decode_all(&s.base)?;
    let reports = s.metrics(&trajs)?;
    for (task, t) in s.tasks.iter().zip(&trajs) {
        s.out.write_json(&format!("trajectories/{}.json", task.id), t)?;
    }
    s.write_costs("costs", &trajs)?;
    let rows: Vec<MetricsRow> = s
        .tasks
        .iter()
        .zip(&reports)
        .map(|(task, r)| MetricsRow {
            id: &task.id,
            nfe: r.nfe,
            eff_nfe: r.eff_nfe,
            prefill_steps: r.prefill_steps,
            decode_steps: r.decode_steps,
            total_jumps: r.total_jumps,
            tokens_generated: r.tokens_generated,
            initial_gen_length: r.initial_gen_length,
            final_gen_length: r.final_gen_length,
            truncations: r.truncations.len(),
            prefill_time_frac: r.prefill_time_frac,
            total_est_time_s: r.total_est_time_s,
        })
        .collect();
    s.out.write_csv("metrics.csv", &rows)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        strategy: Strategy,
        model: ModelInfo<'a>,
        run_config: &'a RunConfig,
        profile: &'a HardwareProfile,
        tasks: Vec<TaskSummary<'a>>,
        aggregate: Aggregate,
    }
    let summary = Summary {
        strategy: s.base.strategy,
        model: ModelInfo {
            kind: s.model_kind,
            config: &s.cfg,
        },
        run_config: &s.base,
        profile: &s.profile,
        tasks: task_summaries(&s.tasks, &reports),
        aggregate: aggregate(&reports),
    };
    s.out.write_json("summary.json", &summary)?;
    log::info!("decoded {} tasks into {}", s.tasks.len(), args.out.display());
    Ok(())
}

fn task_summaries<'a>(tasks: &'a [TaskRecord], reports: &'a [MetricsReport]) -> Vec<TaskSummary<'a>> {
    tasks
        .iter()
        .zip(reports)
        .map(|(t, r)| TaskSummary {
            id: &t.id,
            note: t.note.as_deref(),
            metrics: r,
        })
        .collect()
}

/// Speedup column name: later strategy over earlier one.
fn speedup_name(later: Strategy, earlier: Strategy) -> String {
    format!("{}/{}", later.as_str(), earlier.as_str())
}

#[derive(Serialize)]
struct StrategyCell {
    nfe: usize,
    eff_nfe: usize,
    tokens: usize,
    truncations: usize,
    est_time_s: f64,
}

#[derive(Serialize)]
struct CompareRow {
    task: String,
    strategies: BTreeMap<String, StrategyCell>,
    speedups: BTreeMap<String, f64>,
}

pub fn compare(args: &DecodeArgs, strategies: &[Strategy]) -> CliResult<()> {
    if strategies.len() < 2 {
        return Err(CliError::Usage("compare needs at least two strategies".into()));
    }
    for (i, s) in strategies.iter().enumerate() {
        if strategies[..i].contains(s) {
            return Err(CliError::Usage(format!("strategy {} listed twice", s.as_str())));
        }
    }
    let s = setup(args, None)?;
    let mut runs = Vec::new();
    for &strategy in strategies {
        let mut config = s.base.clone();
        config.strategy = strategy;
        let trajs = s.decode_all(&config)?;
        for (task, t) in s.tasks.iter().zip(&trajs) {
            s.out
                .write_json(&format!("trajectories/{}/{}.json", strategy.as_str(), task.id), t)?;
        }
        let reports = s.metrics(&trajs)?;
        runs.push((strategy, trajs, reports));
    }

    let pairs: Vec<(usize, usize)> = (0..strategies.len())
        .flat_map(|j| (0..j).map(move |i| (i, j)))
        .collect();
    let mut rows = Vec::new();
    for (ti, task) in s.tasks.iter().enumerate() {
        let mut speedups = BTreeMap::new();
        for &(i, j) in &pairs {
            let v = estimate_speedup(&runs[i].1[ti], &runs[j].1[ti], &s.cfg, &s.profile)?;
            speedups.insert(speedup_name(strategies[j], strategies[i]), v);
        }
        rows.push(CompareRow {
            task: task.id.clone(),
            strategies: runs
                .iter()
                .map(|(st, _, reports)| {
                    let r = &reports[ti];
                    (
                        st.as_str().to_string(),
                        StrategyCell {
                            nfe: r.nfe,
                            eff_nfe: r.eff_nfe,
                            tokens: r.tokens_generated,
                            truncations: r.truncations.len(),
                            est_time_s: r.total_est_time_s,
                        },
                    )
                })
                .collect(),
            speedups,
        });
    }
    let aggregates: Vec<Aggregate> = runs.iter().map(|(_, _, r)| aggregate(r)).collect();
    let mut total_speedups = BTreeMap::new();
    for &(i, j) in &pairs {
        total_speedups.insert(
            speedup_name(strategies[j], strategies[i]),
            aggregates[i].total_est_time_s / aggregates[j].total_est_time_s,
        );
    }
    let total = CompareRow {
        task: "ALL".into(),
        strategies: strategies
            .iter()
            .zip(&aggregates)
            .map(|(st, a)| {
                (
                    st.as_str().to_string(),
                    StrategyCell {
                        nfe: a.nfe,
                        eff_nfe: a.eff_nfe,
                        tokens: a.tokens_generated,
                        truncations: a.truncations,
                        est_time_s: a.total_est_time_s,
                    },
                )
            })
            .collect(),
        speedups: total_speedups,
    };

    let mut header = vec!["task".to_string()];
    for st in strategies {
        for col in ["nfe", "eff_nfe", "tokens", "truncations", "est_time_s"] {
            header.push(format!("{}_{col}", st.as_str()));
        }
    }
    let speed_cols: Vec<String> = pairs
        .iter()
        .map(|&(i, j)| speedup_name(strategies[j], strategies[i]))
        .collect();
    header.extend(speed_cols.iter().cloned());
    let table: Vec<Vec<String>> = rows
        .iter()
        .chain(std::iter::once(&total))
        .map(|row| {
            let mut cells = vec![row.task.clone()];
            for st in strategies {
                let c = &row.strategies[st.as_str()];
                cells.extend([
                    c.nfe.to_string(),
                    c.eff_nfe.to_string(),
                    c.tokens.to_string(),
                    c.truncations.to_string(),
                    c.est_time_s.to_string(),
                ]);
            }
            cells.extend(speed_cols.iter().map(|k| row.speedups[k].to_string()));
            cells
        })
        .collect();
    s.out.write_table("compare.csv", &header, &table)?;

    #[derive(Serialize)]
    struct CompareJson<'a> {
        strategies: Vec<&'static str>,
        speedup_columns: &'a [String],
        profile: &'a HardwareProfile,
        tasks: &'a [CompareRow],
        total: &'a CompareRow,
    }
    s.out.write_json(
        "compare.json",
        &CompareJson {
            strategies: strategies.iter().map(|s| s.as_str()).collect(),
            speedup_columns: &speed_cols,
            profile: &s.profile,
            tasks: &rows,
            total: &total,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct PhaseSummary {
    steps: usize,
    mean_ai: Option<f64>,
    bound: Option<Bound>,
    compute_bound_steps: usize,
    memory_bound_steps: usize,
    est_time_s: f64,
}

pub fn roofline(args: &DecodeArgs, strategy: Option<Strategy>) -> CliResult<()> {
    let s = setup(args, strategy)?;
    let trajs = s.decode_all(&s.base)?;
    s.write_costs("roofline", &trajs)?;
    let balance = s.profile.balance();
    let mut all = Vec::new();
    for t in &trajs {
        all.extend(trajectory_costs(t, &s.cfg, &s.profile)?);
    }
    let phase_summary = |phase: Phase| {
        let rows: Vec<_> = all.iter().filter(|c| c.phase == phase).collect();
        let mean_ai = (!rows.is_empty())
            .then(|| rows.iter().map(|c| c.arithmetic_intensity).sum::<f64>() / rows.len() as f64);
        PhaseSummary {
            steps: rows.len(),
            mean_ai,
            bound: mean_ai.map(|ai| if ai >= balance { Bound::Compute } else { Bound::Memory }),
            compute_bound_steps: rows.iter().filter(|c| c.bound == Bound::Compute).count(),
            memory_bound_steps: rows.iter().filter(|c| c.bound == Bound::Memory).count(),
            est_time_s: rows.iter().map(|c| c.est_time_s).sum(),
        }
    };

    #[derive(Serialize)]
    struct RooflineSummary<'a> {
        strategy: Strategy,
        profile: &'a HardwareProfile,
        balance: f64,
        flops_formula: &'static str,
        bytes_formula: &'static str,
        phases: BTreeMap<&'static str, PhaseSummary>,
    }
    let summary = RooflineSummary {
        strategy: s.base.strategy,
        profile: &s.profile,
        balance,
        flops_formula: "L*(8*T*d^2 + 4*T*C*d + 4*T*d*d_ff) + 2*T*d*vocab",
        bytes_formula: "4*(params + 2*L*C*d + 2*L*T*d)",
        phases: [Phase::Prefill, Phase::Decode]
            .into_iter()
            .map(|p| (p.as_str(), phase_summary(p)))
            .collect(),
    };
    s.out.write_json("roofline_summary.json", &summary)
}

pub fn gen_tasks(args: &GenTasksArgs) -> CliResult<()> {
    if args.count == 0 || args.min_prompt == 0 || args.min_prompt > args.max_prompt {
        return Err(CliError::Usage(
            "need --count >= 1 and 1 <= --min-prompt <= --max-prompt".into(),
        ));
    }
    let cfg = load_model_config(args.model_config.as_ref())?;
    let top = cfg.mask_token_id.min(cfg.eos_token_id);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut out = String::new();
    for i in 0..args.count {
        let len = rng.random_range(args.min_prompt..=args.max_prompt);
        let prompt_tokens = (0..len).map(|_| rng.random_range(0..top)).collect();
        let eos_offset = args
            .eos_offset
            .map(|base| base + rng.random_range(0..=args.eos_jitter));
        let task = TaskRecord {
            id: format!("task-{i:04}"),
            prompt_tokens,
            note: Some(format!("synthetic seed {} #{i}", args.seed)),
            eos_offset,
        };
        out.push_str(&serde_json::to_string(&task).expect("task serialises"));
        out.push('\n');
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(&args.out, out).map_err(|e| CliError::io(&args.out, e))
}

pub fn mask(args: &MaskArgs) -> CliResult<()> {
    let stage = Stage::try_from(args.stage).map_err(CliError::Usage)?;
    let bs = args.block_size;
    if bs == 0 {
        return Err(CliError::Usage("--block-size must be positive".into()));
    }
    if args.decoded + args.candidates > bs {
        return Err(CliError::Usage(
            "--decoded plus --candidates exceeds the block size".into(),
        ));
    }
    let block = args.prefix_len..args.prefix_len + bs;
    let cache: Vec<usize> = (0..args.prefix_len)
        .chain(block.end..block.end + args.suffix_len)
        .collect();
    let decoded: Vec<usize> = (block.end - args.decoded..block.end).collect();
    let layout = if args.candidates == 0 {
        build_block_layout(block.clone(), &cache)?
    } else {
        let cands = CandidateSet::new(
            (0..args.candidates)
                .map(|i| Candidate {
                    position: block.start + i,
                    token: 0,
                    confidence: 1.0 - 0.1 * (i + 1) as f64,
                })
                .collect(),
        )?;
        build_spec_layout(block, &SpecSet::new(stage, cands), &decoded, &cache)?
    };
    let csv = layout.mask_csv();
    match &args.dump_mask {
        Some(p) => std::fs::write(p, csv).map_err(|e| CliError::io(p, e)),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
