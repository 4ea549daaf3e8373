use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use duet_core::dataset::{self, OverflowMode, SamplingSpec, Task, TrainingExample};
use duet_core::engine::{run_session, FrameTimeline, SessionConfig, TimedMessage};
use duet_core::evaluation::{self, RelevanceOptions};
use duet_core::metrics::{CachedJudge, Judge, OverlapJudge, CAPTION_IOU_THRESHOLDS};
use duet_core::policy::PolicyConfig;
use duet_core::scenario::{Scenario, ScenarioLibrary};
use duet_core::scorer::{Scorer, ScriptedScorer, ScriptedScript};
use duet_core::transcript::{ChatTemplateSpec, DuetTranscript};
use duet_core::wire::{self, ExternalScorer};
use duet_service::{AppState, ScorerBackend};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "duet", version, about = "Streaming video-text duet toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one session over a frame timeline and print the result JSON.
    RunSession(RunSessionArgs),
    /// Convert segment annotations into duet training examples.
    BuildDataset(BuildDatasetArgs),
    /// Score predictions against gold annotations.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Serve the session HTTP API.
    Serve(ServeArgs),
    /// Answer the scorer wire protocol from a scripted scenario.
    ScorerStub(ScorerStubArgs),
    /// Render transcripts (or training examples) with the chat template.
    Render(RenderArgs),
}

#[derive(Args)]
struct ScenarioSource {
    /// Bundled or directory-loaded scenario id.
    #[arg(long)]
    scenario: Option<String>,
    /// Extra scenarios (*.json), overriding bundled ones with the same id.
    #[arg(long)]
    scenario_dir: Option<PathBuf>,
}

impl ScenarioSource {
    fn library(&self) -> Result<ScenarioLibrary<f64>> {
        let mut lib = ScenarioLibrary::bundled();
        if let Some(dir) = &self.scenario_dir {
            lib.load_dir(dir).with_context(|| format!("loading scenarios from {}", dir.display()))?;
        }
        Ok(lib)
    }

    fn scenario(&self) -> Result<Option<Scenario<f64>>> {
        match &self.scenario {
            Some(id) => Ok(Some(self.library()?.get(id)?.clone())),
            None => Ok(None),
        }
    }
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("scorer").args(["script", "scorer_cmd", "scorer_addr"]))]
struct RunSessionArgs {
    /// Timeline JSON: `{"fps":..,"frames":[..],"user_turns":[..]}`.
    #[arg(long, required_unless_present = "scenario")]
    frames: Option<PathBuf>,
    #[command(flatten)]
    source: ScenarioSource,
    /// Scripted scorer JSON.
    #[arg(long)]
    script: Option<PathBuf>,
    /// External scorer command line, spoken to over stdin/stdout.
    #[arg(long)]
    scorer_cmd: Option<String>,
    /// External scorer at host:port.
    #[arg(long)]
    scorer_addr: Option<String>,
    /// `sum:s=<real>` or `combo:t=<real>`.
    #[arg(long)]
    policy: Option<PolicyConfig<f64>>,
    /// Re-time the frames at this rate.
    #[arg(long)]
    fps: Option<f64>,
    /// Keep generated responses out of the scorer's context.
    #[arg(long)]
    no_context_responses: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct TimelineFile {
    #[serde(flatten)]
    timeline: FrameTimeline,
    #[serde(default)]
    user_turns: Vec<TimedMessage>,
}

#[derive(Args)]
struct BuildDatasetArgs {
    #[arg(long)]
    task: Task,
    #[arg(long, default_value_t = 2.0)]
    fps: f64,
    #[arg(long, default_value_t = 120)]
    max_frames: usize,
    /// `truncate` keeps the head, `uniform` resamples evenly.
    #[arg(long, default_value = "truncate")]
    overflow: OverflowMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Source annotations (JSON Lines); `-` for stdin.
    #[arg(long = "in", default_value = "-")]
    input: PathBuf,
    /// `-` for stdout.
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// In-span score and turn counts for answer-as-you-watch QA.
    Magqa(MagqaArgs),
    /// Temporal grounding: mean IoU and R@{0.5,0.7}.
    Grounding(RelevanceArgs),
    /// Highlight detection: mAP and HIT@1.
    Highlight(RelevanceArgs),
    /// Dense captioning F1 from session model turns.
    Captioning(PairArgs),
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
}

#[derive(Args)]
struct MagqaArgs {
    #[command(flatten)]
    files: PairArgs,
    /// `overlap` or `cached:<judgements.jsonl>`.
    #[arg(long, default_value = "overlap")]
    judge: String,
}

#[derive(Args)]
struct RelevanceArgs {
    #[command(flatten)]
    files: PairArgs,
    /// Trailing smoothing window over relevance scores.
    #[arg(long, default_value_t = 0)]
    smooth_w: usize,
    /// Min-max normalize each query's scores (`--normalize=false` keeps them raw).
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    normalize: bool,
    #[arg(long, default_value_t = duet_core::metrics::DEFAULT_REL_THRESHOLD)]
    rel_threshold: f64,
}

impl RelevanceArgs {
    fn options(&self) -> RelevanceOptions<f64> {
        RelevanceOptions {
            smooth_w: self.smooth_w,
            normalize: self.normalize,
            rel_threshold: self.rel_threshold,
        }
    }
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("scorer").args(["scorer_cmd", "scorer_addr"]))]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Extra scenarios; frame images under it are served at `/frames/`.
    #[arg(long)]
    scenario_dir: Option<PathBuf>,
    /// Default scorer command for uploaded sessions without a script.
    #[arg(long)]
    scorer_cmd: Option<String>,
    #[arg(long)]
    scorer_addr: Option<String>,
}

#[derive(Args)]
struct ScorerStubArgs {
    #[command(flatten)]
    source: ScenarioSource,
    /// Scripted scorer JSON, instead of a scenario.
    #[arg(long, required_unless_present = "scenario", conflicts_with = "scenario")]
    script: Option<PathBuf>,
    /// Serve TCP connections on this address instead of stdin/stdout.
    #[arg(long)]
    listen: Option<String>,
}

#[derive(Args)]
struct RenderArgs {
    /// JSON Lines of transcripts or training examples; `-` for stdin.
    #[arg(long = "in", default_value = "-")]
    input: PathBuf,
}

fn open_input(path: &Path) -> Result<Box<dyn BufRead>> {
    if path == Path::new("-") {
        return Ok(Box::new(io::stdin().lock()));
    }
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Box::new(BufReader::new(file)))
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        None => Ok(Box::new(io::stdout().lock())),
        Some(p) if p == Path::new("-") => Ok(Box::new(io::stdout().lock())),
        Some(p) => {
            let file = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Ok(Box::new(BufWriter::new(file)))
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_script(path: &Path) -> Result<ScriptedScript<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ScriptedScript::from_json(&text)?)
}

fn split_command(cmd: &str) -> Result<Vec<String>> {
    match shlex::split(cmd) {
        Some(argv) if !argv.is_empty() => Ok(argv),
        _ => bail!("cannot parse scorer command `{cmd}`"),
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run_session_cmd(args: RunSessionArgs) -> Result<()> {
    let scenario = args.source.scenario()?;
    let (mut timeline, user_turns) = match (&args.frames, &scenario) {
        (Some(path), _) => {
            let file: TimelineFile = read_json(path)?;
            (file.timeline, file.user_turns)
        }
        (None, Some(s)) => (s.timeline(), s.user_turns.clone()),
        (None, None) => unreachable!("clap requires --frames or --scenario"),
    };
    if let Some(fps) = args.fps {
        if !(fps > 0.0 && fps.is_finite()) {
            bail!("--fps must be > 0, got {fps}");
        }
        timeline = timeline.retimed(fps);
    }
    let policy = match (args.policy, &scenario) {
        (Some(p), _) => p,
        (None, Some(s)) => s.policy,
        (None, None) => bail!("--policy is required without --scenario"),
    };
    let mut scorer: Box<dyn Scorer<f64>> = if let Some(path) = &args.script {
        Box::new(ScriptedScorer::new(read_script(path)?)?)
    } else if let Some(cmd) = &args.scorer_cmd {
        Box::new(ExternalScorer::spawn(&split_command(cmd)?)?)
    } else if let Some(addr) = &args.scorer_addr {
        Box::new(ExternalScorer::connect(addr.as_str())?)
    } else if let Some(s) = &scenario {
        Box::new(s.scorer())
    } else {
        bail!("need one of --script, --scorer-cmd, --scorer-addr or --scenario");
    };
    let mut config = SessionConfig::new(timeline.fps, policy);
    let scenario_context = scenario.as_ref().is_none_or(|s| s.include_responses_in_context);
    config.include_responses_in_context = scenario_context && !args.no_context_responses;

    let result = run_session(&timeline, user_turns, &mut scorer, config)?;
    let mut out = open_output(args.out.as_deref())?;
    writeln!(out, "{}", result.to_json())?;
    out.flush()?;
    Ok(())
}

fn build_dataset_cmd(args: BuildDatasetArgs) -> Result<()> {
    let spec = SamplingSpec::new(args.fps, args.max_frames, args.overflow);
    let report = dataset::build_dataset(args.task, open_input(&args.input)?, &spec, args.seed)?;
    for (id, reason) in &report.skipped {
        eprintln!("skipped {id}: {reason}");
    }
    let out_path = (args.out != Path::new("-")).then_some(args.out.as_path());
    let mut out = open_output(out_path)?;
    dataset::write_examples(&report.examples, &mut out)?;
    let stats = dataset::dataset_stats(&report.examples);
    eprintln!(
        "{} examples, {} skipped; {}",
        report.examples.len(),
        report.skipped.len(),
        serde_json::to_string(&stats)?
    );
    Ok(())
}

fn read_pair<P: DeserializeOwned, G: DeserializeOwned>(files: &PairArgs) -> Result<(Vec<P>, Vec<G>)> {
    let preds = evaluation::read_records(open_input(&files.pred)?)
        .with_context(|| format!("reading {}", files.pred.display()))?;
    let golds = evaluation::read_records(open_input(&files.gold)?)
        .with_context(|| format!("reading {}", files.gold.display()))?;
    Ok((preds, golds))
}

fn eval_cmd(command: EvalCommand) -> Result<()> {
    match command {
        EvalCommand::Magqa(args) => {
            let judge: Box<dyn Judge> = match args.judge.as_str() {
                "overlap" => Box::new(OverlapJudge),
                other => match other.strip_prefix("cached:") {
                    Some(path) => Box::new(
                        CachedJudge::from_jsonl(open_input(Path::new(path))?)
                            .with_context(|| format!("reading judgements from {path}"))?,
                    ),
                    None => bail!("--judge must be `overlap` or `cached:<file>`, got `{other}`"),
                },
            };
            let (preds, golds) = read_pair(&args.files)?;
            print_json(&evaluation::eval_magqa::<f64>(&preds, &golds, judge.as_ref())?)
        }
        EvalCommand::Grounding(args) => {
            let (preds, golds) = read_pair(&args.files)?;
            print_json(&evaluation::eval_grounding(&preds, &golds, &args.options())?)
        }
        EvalCommand::Highlight(args) => {
            let (preds, golds) = read_pair(&args.files)?;
            print_json(&evaluation::eval_highlight(&preds, &golds, &args.options())?)
        }
        EvalCommand::Captioning(files) => {
            let (preds, golds) = read_pair(&files)?;
            print_json(&evaluation::eval_captioning::<f64>(&preds, &golds, &CAPTION_IOU_THRESHOLDS)?)
        }
    }
}

fn serve_cmd(args: ServeArgs) -> Result<()> {
    let mut scenarios = ScenarioLibrary::bundled();
    if let Some(dir) = &args.scenario_dir {
        let n = scenarios.load_dir(dir)?;
        eprintln!("loaded {n} scenarios from {}", dir.display());
    }
    let backend = match (&args.scorer_cmd, &args.scorer_addr) {
        (Some(cmd), _) => Some(ScorerBackend::Command(split_command(cmd)?)),
        (None, Some(addr)) => Some(ScorerBackend::Address(addr.clone())),
        (None, None) => None,
    };
    let state = AppState::with_options(scenarios, backend, args.scenario_dir.clone());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.addr)
            .await
            .with_context(|| format!("binding {}", args.addr))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        duet_service::serve(listener, state).await?;
        Ok(())
    })
}

fn scorer_stub_cmd(args: ScorerStubArgs) -> Result<()> {
    let script = match (&args.script, args.source.scenario()?) {
        (Some(path), _) => read_script(path)?,
        (None, Some(s)) => s.script,
        (None, None) => unreachable!("clap requires --script or --scenario"),
    };
    match &args.listen {
        None => {
            let mut scorer = ScriptedScorer::new(script)?;
            wire::serve::<f64, _>(&mut scorer, io::stdin().lock(), io::stdout().lock())?;
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            // One connection at a time, each with a fresh script position.
            for stream in listener.incoming() {
                let stream = stream?;
                let mut scorer = ScriptedScorer::new(script.clone())?;
                let reader = BufReader::new(stream.try_clone()?);
                if let Err(e) = wire::serve::<f64, _>(&mut scorer, reader, stream) {
                    eprintln!("connection ended: {e}");
                }
            }
        }
    }
    Ok(())
}

fn render_cmd(args: RenderArgs) -> Result<()> {
    let template = ChatTemplateSpec::default();
    let mut out = io::stdout().lock();
    for (i, line) in open_input(&args.input)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let transcript = match serde_json::from_str::<TrainingExample>(&line) {
            Ok(example) => example.transcript,
            Err(_) => DuetTranscript::from_json(&line).with_context(|| format!("line {}", i + 1))?,
        };
        writeln!(out, "{}", transcript.render(&template))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::RunSession(args) => run_session_cmd(args),
        Command::BuildDataset(args) => build_dataset_cmd(args),
        Command::Eval(command) => eval_cmd(command),
        Command::Serve(args) => serve_cmd(args),
        Command::ScorerStub(args) => scorer_stub_cmd(args),
        Command::Render(args) => render_cmd(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
