use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use protolab::agent::{save_checkpoint, CheckpointMeta};
use protolab::analysis::{
    capacity_calc, establishment_probe, positive_listening_test, positive_signalling_test,
    EstablishmentReport, SignallingReport,
};
use protolab::env::{read_traces, write_traces};
use protolab::evaluation::{
    heatmaps, metrics, play, protocol_diversity, selfplay_performance, zcp, MetricsReport,
    TeacherRole, ZcpReport,
};
use protolab::experiment::{evaluate_point, ExperimentConfig, PointSummary};
use protolab::seeds::derive_seed;
use protolab::training::{history_csv, HistoryRow, Trainer};
use protolab::{ChannelConfig, Error, Mutation, Permutation, PolicyConfig, PolicyParams, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::{
    AnalyzeArgs, CapacityArgs, Cli, Command, EvalArgs, EvalMode, FiguresArgs, TrainArgs,
};
use crate::output::{load_agents, OutDir, CHECKPOINT_EXT};

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Figures(a) => figures(a),
        Command::Capacity(a) => capacity(a),
        Command::Analyze(a) => analyze(a),
    }
}

/// 0 success, 2 configuration or usage error, 3 divergence, 4 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => 3,
        Error::Io(_) | Error::Serde(_) => 4,
        _ => 2,
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
fn run_parallel<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<O>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                slots.lock().expect("no panics while holding the lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|o| o.expect("every job ran"))
        .collect()
}

// ---------------------------------------------------------------------------
// train

struct AgentRun {
    history: Vec<HistoryRow>,
    params: Result<PolicyParams<f32>>,
}

fn train_agent(config: &ExperimentConfig, agent: usize) -> AgentRun {
    let mut trainer = match Trainer::new(config.train_config(agent)) {
        Ok(t) => t,
        Err(e) => {
            return AgentRun {
                history: Vec::new(),
                params: Err(e),
            }
        }
    };
    while !trainer.is_done() {
        match trainer.run_epoch() {
            Ok(row) => {
                if row.epoch % 25 == 0 || trainer.is_done() {
                    info!("{} agent {agent}: {}", config.name, row.csv_line());
                }
            }
            Err(e) => {
                return AgentRun {
                    history: trainer.history().to_vec(),
                    params: Err(e),
                }
            }
        }
    }
    let history = trainer.history().to_vec();
    AgentRun {
        history,
        params: Ok(trainer.into_params()),
    }
}

fn point_value(c: &ExperimentConfig) -> Option<f64> {
    match (c.mutation, c.permutation) {
        (Mutation::Off, Permutation::Off) => None,
        (Mutation::Off, Permutation::Subset { size }) => Some(size as f64),
        (m, _) => Some(m.probability()),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    let root = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    let mut out = OutDir::create(&root)?;
    out.write(
        "config.toml",
        cfg.to_toml_string()?.as_bytes(),
        Some(cfg.digest()),
    )?;

    let points = cfg.expand();
    let nested = cfg.sweep.is_some();
    let tasks: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(p, pt)| (0..pt.config.n_agents).map(move |a| (p, a)))
        .collect();
    let runs = run_parallel(&tasks, args.jobs, |&(p, a)| {
        train_agent(&points[p].config, a)
    });

    let mut first_error = None;
    let mut by_point: BTreeMap<usize, Vec<PolicyParams<f32>>> = BTreeMap::new();
    for (&(p, a), run) in tasks.iter().zip(runs) {
        let pc = &points[p].config;
        let dir = if nested {
            format!("{}/", pc.name)
        } else {
            String::new()
        };
        let digest = pc.digest();
        out.write(
            &format!("{dir}agent_{a:02}.history.csv"),
            history_csv(&run.history).as_bytes(),
            Some(digest.clone()),
        )?;
        match run.params {
            Ok(params) => {
                let mut meta =
                    CheckpointMeta::for_config(&params.config, digest.clone(), pc.agent_seed(a));
                meta.label = format!("{}/agent_{a:02}", pc.name);
                let bytes = save_checkpoint(&params, &meta)?;
                out.write(
                    &format!("{dir}agent_{a:02}.{CHECKPOINT_EXT}"),
                    &bytes,
                    Some(digest),
                )?;
                by_point.entry(p).or_default().push(params);
            }
            Err(e) => {
                warn!("{} agent {a} failed: {e}", pc.name);
                first_error.get_or_insert(e);
            }
        }
    }
    for (p, pt) in points.iter().enumerate() {
        let dir = if nested {
            format!("{}/", pt.config.name)
        } else {
            String::new()
        };
        if nested {
            out.write(
                &format!("{dir}config.toml"),
                pt.config.to_toml_string()?.as_bytes(),
                Some(pt.config.digest()),
            )?;
        }
        let agents = by_point.get(&p).map(Vec::as_slice).unwrap_or_default();
        if !args.no_eval && agents.len() == pt.config.n_agents {
            let summary = evaluate_point(&pt.config, point_value(&pt.config), agents)?;
            out.write_json(
                &format!("{dir}summary.json"),
                &summary,
                Some(pt.config.digest()),
            )?;
        }
    }
    out.finish()?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// eval

#[derive(Serialize)]
struct AgentValue {
    agent: String,
    checkpoint: String,
    value: f64,
}

#[derive(Serialize)]
struct AgentMetrics {
    agent: String,
    checkpoint: String,
    #[serde(flatten)]
    metrics: MetricsReport,
}

#[derive(Serialize)]
struct ZcpOutput {
    agents: Vec<String>,
    #[serde(flatten)]
    report: ZcpReport,
}

fn eval(args: EvalArgs) -> Result<()> {
    let agents = load_agents(&args.checkpoints)?;
    let mut out = OutDir::create(&args.out)?;
    let labels: Vec<String> = agents.iter().enumerate().map(|(i, a)| a.label(i)).collect();
    let path_of = |i: usize| match agents[i].meta.label.as_str() {
        "" => agents[i].path.display().to_string(),
        label => format!("{} ({label})", agents[i].path.display()),
    };
    let vocab = agents[0].params.config.vocab;
    match args.mode {
        EvalMode::Zcp => {
            let params: Vec<_> = agents.iter().map(|a| a.params.clone()).collect();
            let report = zcp(&params, args.games, args.seed)?;
            out.write("zcp.csv", report.csv().as_bytes(), None)?;
            println!(
                "ZCP {:.4} +/- {:.4} over {} encounters",
                report.mean,
                report.std,
                report.encounters.len()
            );
            out.write_json(
                "zcp.json",
                &ZcpOutput {
                    agents: labels,
                    report,
                },
                None,
            )?;
        }
        EvalMode::Responsiveness => {
            let clean = ChannelConfig::clean(vocab);
            let rows = agents
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    Ok(AgentMetrics {
                        agent: labels[i].clone(),
                        checkpoint: path_of(i),
                        metrics: metrics(
                            &a.params,
                            &clean,
                            args.episodes,
                            derive_seed(args.seed, i as u64),
                        )?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            for r in &rows {
                println!(
                    "{}: R_T {:.4} R_S {:.4} P_D {:.4}",
                    r.agent, r.metrics.r_t, r.metrics.r_s, r.metrics.p_d
                );
            }
            out.write_json("responsiveness.json", &rows, None)?;
        }
        EvalMode::Diversity => {
            let rows = agents
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let value = protocol_diversity(
                        &a.params,
                        args.episodes,
                        &mut rng(args.seed, i as u64),
                    )?;
                    println!("{}: P_D {value:.4}", labels[i]);
                    Ok(AgentValue {
                        agent: labels[i].clone(),
                        checkpoint: path_of(i),
                        value,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.write_json("diversity.json", &rows, None)?;
        }
        EvalMode::Heatmap => {
            for (i, a) in agents.iter().enumerate() {
                let h = heatmaps(&a.params, args.episodes, &mut rng(args.seed, i as u64))?;
                out.write(
                    &format!("heatmap/{}_class.csv", labels[i]),
                    h.class_csv().as_bytes(),
                    None,
                )?;
                out.write(
                    &format!("heatmap/{}_timestep.csv", labels[i]),
                    h.timestep_csv().as_bytes(),
                    None,
                )?;
            }
        }
        EvalMode::Selfplay => {
            let rows = agents
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let channel = a
                        .config()
                        .map(|c| c.channel())
                        .unwrap_or_else(|| ChannelConfig::clean(vocab));
                    let value = selfplay_performance(
                        &a.params,
                        &channel,
                        args.episodes,
                        &mut rng(args.seed, i as u64),
                    )?;
                    println!("{}: self-play {value:.4}", labels[i]);
                    Ok(AgentValue {
                        agent: labels[i].clone(),
                        checkpoint: path_of(i),
                        value,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.write_json("selfplay.json", &rows, None)?;
        }
    }
    out.finish()
}

// ---------------------------------------------------------------------------
// figures

/// Directories holding a config and at least one checkpoint.
fn point_dirs(root: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    let has_ckpt = entries
        .iter()
        .any(|p| p.extension().is_some_and(|e| e == CHECKPOINT_EXT));
    if has_ckpt && root.join("config.toml").exists() {
        found.push(root.to_path_buf());
    }
    for e in entries.into_iter().filter(|p| p.is_dir()) {
        point_dirs(&e, found)?;
    }
    Ok(())
}

fn load_summary(dir: &Path) -> Result<PointSummary> {
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let path = dir.join("summary.json");
    if path.exists() {
        return Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?);
    }
    info!("evaluating {}", dir.display());
    let agents: Vec<_> = load_agents(&[dir.to_path_buf()])?
        .into_iter()
        .filter(|a| a.path.parent() == Some(dir))
        .map(|a| a.params)
        .collect();
    let cfg = ExperimentConfig {
        n_agents: agents.len(),
        ..cfg
    };
    evaluate_point(&cfg, point_value(&cfg), &agents)
}

const FIGURE_HEADER: &str = "x,zcp_mean,zcp_std,selfplay_mean,selfplay_std,R_S,R_T,P_D,baseline";

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn figure_csv(points: &[(f64, PointSummary)], baseline: Option<f64>) -> String {
    let mut s = format!("{FIGURE_HEADER}\n");
    for (x, p) in points {
        s.push_str(&format!(
            "{x},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            opt(p.zcp_mean()),
            opt(p.zcp_std()),
            p.selfplay_mean,
            p.selfplay_std,
            p.r_s,
            p.r_t,
            p.p_d,
            opt(baseline)
        ));
    }
    s
}

fn figures(args: FiguresArgs) -> Result<()> {
    let mut dirs = Vec::new();
    point_dirs(&args.runs, &mut dirs)?;
    if dirs.is_empty() {
        return Err(Error::Config(format!(
            "no trained experiment points under {}",
            args.runs.display()
        )));
    }
    let mut baseline = None;
    let mut mutation: Vec<(f64, PointSummary)> = Vec::new();
    let mut permutation: Vec<(f64, PointSummary)> = Vec::new();
    let mut expected: Vec<String> = Vec::new();
    for dir in &dirs {
        let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
        let summary = load_summary(dir)?;
        match (cfg.mutation, cfg.permutation) {
            (Mutation::Off, Permutation::Off) => {
                baseline.get_or_insert(summary);
            }
            (Mutation::Off, Permutation::Subset { size }) => {
                permutation.push((size as f64, summary))
            }
            (m, _) => mutation.push((m.probability(), summary)),
        }
    }
    // Sweep configs at the top of a run list the points that should exist.
    let mut tops = vec![args.runs.clone()];
    tops.extend(
        dirs.iter()
            .filter_map(|d| d.parent().map(Path::to_path_buf)),
    );
    tops.sort();
    tops.dedup();
    for top in tops {
        if let Ok(cfg) = ExperimentConfig::load(&top.join("config.toml")) {
            if cfg.sweep.is_some() {
                expected.extend(cfg.expand().into_iter().map(|p| p.config.name));
            }
        }
    }
    for name in &expected {
        let present = mutation
            .iter()
            .chain(&permutation)
            .any(|(_, p)| &p.name == name);
        if !present {
            warn!("sweep point {name} has no results; figures are partial");
        }
    }
    let by_x = |v: &mut Vec<(f64, PointSummary)>| v.sort_by(|a, b| a.0.total_cmp(&b.0));
    by_x(&mut mutation);
    by_x(&mut permutation);

    let mut out = OutDir::create(&args.out)?;
    let base_zcp = baseline.as_ref().and_then(PointSummary::zcp_mean);
    if !mutation.is_empty() {
        out.write(
            "fig3_mutation.csv",
            figure_csv(&mutation, base_zcp).as_bytes(),
            None,
        )?;
    }
    if !permutation.is_empty() {
        out.write(
            "fig3_permutation.csv",
            figure_csv(&permutation, base_zcp).as_bytes(),
            None,
        )?;
    }

    let find = |v: &[(f64, PointSummary)], x: f64| {
        v.iter()
            .find(|(vx, _)| (vx - x).abs() < 1e-9)
            .map(|(_, p)| p.clone())
    };
    let rows = [
        ("baseline", baseline.clone()),
        ("permutation_k5", find(&permutation, 5.0)),
        ("mutation_p0.3", find(&mutation, 0.3)),
        ("mutation_p1.0", find(&mutation, 1.0)),
    ];
    let mut table = String::from("experiment,R_T,R_S,P_D,zcp_mean,zcp_std\n");
    for (name, p) in rows {
        match p {
            Some(p) => table.push_str(&format!(
                "{name},{:.6},{:.6},{:.6},{},{}\n",
                p.r_t,
                p.r_s,
                p.p_d,
                opt(p.zcp_mean()),
                opt(p.zcp_std())
            )),
            None => warn!("no results for the {name} row of the summary table"),
        }
    }
    out.write("table1.csv", table.as_bytes(), None)?;
    out.finish()
}

// ---------------------------------------------------------------------------
// capacity

fn capacity(args: CapacityArgs) -> Result<()> {
    let weights = match args.weights {
        Some(w) => w,
        None => PolicyConfig::standard(3, 5, protolab::Activation::Relu)?.param_count() as u64,
    };
    let report = capacity_calc(args.n, args.k, weights)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Serialize)]
struct ListeningSummary {
    t: usize,
    episodes: usize,
    listening_fraction: f64,
    mean_distance: f64,
    mean_prediction_distance: f64,
    mean_utterance_distance: f64,
    mean_state_distance: f64,
    mean_sensitivity: f64,
}

#[derive(Serialize)]
struct AnalysisReport {
    checkpoint: String,
    tolerance: f64,
    establishment: EstablishmentReport,
    signalling: SignallingReport,
    listening: Vec<ListeningSummary>,
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let agent = load_agents(std::slice::from_ref(&args.checkpoint))?.remove(0);
    let params = &agent.params;
    let mut out = OutDir::create(&args.out)?;
    let establishment = establishment_probe(params, args.episodes, &mut rng(args.seed, 0))?;
    let traces = match &args.traces {
        Some(path) => read_traces(BufReader::new(std::fs::File::open(path)?))?,
        None => {
            let clean = ChannelConfig::clean(params.config.vocab);
            let traces = play(
                TeacherRole::Agent(params),
                params,
                &clean,
                args.episodes,
                &mut rng(args.seed, 1),
            )?;
            let mut buf = Vec::new();
            write_traces(&traces, &mut buf)?;
            out.write("traces.jsonl", &buf, None)?;
            traces
        }
    };
    let signalling = positive_signalling_test(&traces, &mut rng(args.seed, 2))?;

    let mut acc: BTreeMap<usize, Vec<protolab::analysis::ListeningStep>> = BTreeMap::new();
    for tr in traces.iter().take(args.listening_episodes) {
        for step in positive_listening_test(params, tr, args.tolerance)?.steps {
            acc.entry(step.t).or_default().push(step);
        }
    }
    let listening = acc
        .into_iter()
        .map(|(t, steps)| {
            let n = steps.len() as f64;
            let mean = |f: fn(&protolab::analysis::ListeningStep) -> f64| {
                steps.iter().map(f).sum::<f64>() / n
            };
            ListeningSummary {
                t,
                episodes: steps.len(),
                listening_fraction: mean(|s| s.listening as u8 as f64),
                mean_distance: mean(|s| s.distance),
                mean_prediction_distance: mean(|s| s.prediction_distance),
                mean_utterance_distance: mean(|s| s.utterance_distance),
                mean_state_distance: mean(|s| s.state_distance),
                mean_sensitivity: mean(|s| s.sensitivity as f64),
            }
        })
        .collect();
    let report = AnalysisReport {
        checkpoint: agent.path.display().to_string(),
        tolerance: args.tolerance,
        establishment,
        signalling,
        listening,
    };
    println!(
        "establishment: {:?} (MI {:.3} of {:.3} bits, R_S {:.3}); signalling MI {:.3} bits, p = {:.4}",
        report.establishment.verdict,
        report.establishment.mi_bits,
        report.establishment.max_bits,
        report.establishment.r_s,
        report.signalling.class_mi_bits,
        report.signalling.p_value
    );
    out.write_json("analysis.json", &report, None)?;
    out.finish()
}
