//! Subcommand implementations.

use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};

use patience_core::engine::{EngineError, OPENING_QUESTION};
use patience_core::metrics;
use patience_core::sim;
use patience_core::{DialogueState, Engine, KnowledgeBase, Outcome};
use patience_service::{AppState, ServiceConfig};

use crate::settings::{resolve, Settings};
use crate::{BenchArgs, Cli, Command, ConsultArgs, ReportArgs, ServeArgs, SimulateArgs};

const DEFAULT_CASES: &str = "data/cases";
const DEFAULT_POLICIES: &str = "app,random,first,oneshot";
const DEFAULT_BENCH_OUT: &str = "out/bench";
const DEFAULT_ADDR: &str = "127.0.0.1:8080";
const DEFAULT_TRANSCRIPTS: &str = "out/transcripts";
const TOP: usize = 5;

pub fn run(cli: Cli) -> Result<()> {
    let settings = resolve(&cli.global)?;
    match cli.command {
        Command::Ingest => ingest(&settings),
        Command::Consult(a) => consult(&settings, a),
        Command::Simulate(a) => simulate(&settings, a),
        Command::Bench(a) => bench(&settings, a),
        Command::Report(a) => report(a),
        Command::Serve(a) => serve(&settings, a),
    }
}

fn ingest(settings: &Settings) -> Result<()> {
    let Some(path) = &settings.session.kb_path else {
        bail!("no knowledge base: pass --kb or set session.kb_path in the config file");
    };
    let kb = KnowledgeBase::ingest(path)?;
    let meta = kb.meta();
    println!(
        "{}: {} symptoms, {} diseases (source {}, version {})",
        path.display(),
        kb.symptom_count(),
        kb.disease_count(),
        meta.source,
        meta.version
    );
    Ok(())
}

/// Distribution top entries and entropy, one line each.
fn render(engine: &Engine, state: &DialogueState, out: &mut impl Write) -> io::Result<()> {
    let (Some(dist), Some(h)) = (state.current_distribution(), state.current_entropy()) else {
        return Ok(());
    };
    writeln!(out, "  H_{} = {h:.4} nats", state.iteration)?;
    for e in dist.entries().iter().take(TOP) {
        let name = engine.kb().disease(&e.id).map_or(e.id.as_str(), |d| d.name.as_str());
        let bar = "#".repeat((e.p * 30.0).round() as usize);
        writeln!(out, "  {:>6.1}%  {name:<28} {bar}", e.p * 100.0)?;
    }
    if dist.other_mass() > 0.0 {
        writeln!(out, "  {:>6.1}%  (other)", dist.other_mass() * 100.0)?;
    }
    Ok(())
}

fn consult(settings: &Settings, args: ConsultArgs) -> Result<()> {
    let engine = Engine::from_config(settings.engine_config()?)?;
    let stdin = io::stdin();
    let mut lines = stdin.lock().lines();
    let mut stdout = io::stdout().lock();
    let mut read = |prompt: &str, stdout: &mut io::StdoutLock| -> Result<String> {
        loop {
            writeln!(stdout, "Doctor: {prompt}")?;
            stdout.flush()?;
            eprint!("> ");
            match lines.next() {
                Some(line) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        return Ok(line);
                    }
                }
                None => bail!("input ended before a diagnosis"),
            }
        }
    };
    let opening = match args.opening {
        Some(o) => o,
        None => read(OPENING_QUESTION, &mut stdout)?,
    };
    let (mut state, mut outcome) = engine.start_session(&opening)?;
    render(&engine, &state, &mut stdout)?;
    loop {
        match outcome {
            Outcome::Question(q) => {
                let answer = read(&q.text, &mut stdout)?;
                match engine.step(&mut state, &answer) {
                    Ok(o) => {
                        outcome = o;
                        render(&engine, &state, &mut stdout)?;
                    }
                    Err(e @ EngineError::Backend(_)) => {
                        eprintln!("error: {e}; please answer again");
                        outcome = Outcome::Question(q);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            Outcome::Diagnosis(d) => {
                writeln!(
                    stdout,
                    "Diagnosis: {} ({:.1}%) after {} turn(s); stopped: {}",
                    d.name,
                    d.probability * 100.0,
                    d.turns_used,
                    d.stop_reason
                )?;
                break;
            }
        }
    }
    if let Some(path) = args.out {
        engine.trace(&state).write(&path)?;
        eprintln!("transcript written to {}", path.display());
    }
    Ok(())
}

fn cases_dir(settings: &Settings, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| settings.file.bench.cases.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_CASES))
}

fn simulate(settings: &Settings, args: SimulateArgs) -> Result<()> {
    let engine = Engine::from_config(settings.engine_config()?)?;
    let cases = sim::load_cases(&cases_dir(settings, args.cases), engine.kb())?;
    let Some(profile) = cases.iter().find(|c| c.case_id == args.case_id) else {
        bail!("no case `{}`", args.case_id);
    };
    let policy = match sim::parse_policies(&args.policy, settings.seed)?.as_slice() {
        [p] => *p,
        _ => bail!("--policy takes exactly one policy"),
    };
    let state = match sim::drive(&engine, profile, policy) {
        Ok(s) => s,
        Err((Some(partial), e)) => {
            print_case(&engine, &partial)?;
            return Err(e.into());
        }
        Err((None, e)) => return Err(e.into()),
    };
    print_case(&engine, &state)?;
    let d = state.diagnosis.as_ref().context("finished session without a diagnosis")?;
    let verdict = if d.disease_id == profile.ground_truth { "hit" } else { "miss" };
    println!(
        "Diagnosis: {} ({:.1}%); ground truth {}: {verdict}; stopped: {}",
        d.name,
        d.probability * 100.0,
        profile.ground_truth,
        d.stop_reason
    );
    if let Some(path) = args.out {
        engine.trace(&state).write(&path)?;
        eprintln!("transcript written to {}", path.display());
    }
    Ok(())
}

fn print_case(engine: &Engine, state: &DialogueState) -> Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "Doctor: {}", state.opening.question)?;
    writeln!(out, "Patient: {}", state.opening.response)?;
    // Replay the distribution history alongside the turns.
    let mut view = state.clone();
    for t in 0..=state.iteration {
        view.iteration = t;
        view.distribution_history = state.distribution_history[..=t].to_vec();
        view.entropy_trace = state.entropy_trace[..=t].to_vec();
        render(engine, &view, &mut out)?;
        if let Some(turn) = state.turns.get(t) {
            writeln!(out, "Doctor: {}", turn.question)?;
            writeln!(out, "Patient: {}", turn.response)?;
        }
    }
    Ok(())
}

fn bench(settings: &Settings, args: BenchArgs) -> Result<()> {
    let engine = Engine::from_config(settings.engine_config()?)?;
    let cases = sim::load_cases(&cases_dir(settings, args.cases), engine.kb())?;
    let list = args
        .policies
        .or_else(|| settings.file.bench.policies.clone())
        .unwrap_or_else(|| DEFAULT_POLICIES.to_string());
    let policies = sim::parse_policies(&list, settings.seed)?;
    let out = args
        .out
        .or_else(|| settings.file.bench.out.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_BENCH_OUT));
    let run = sim::run_benchmark(&engine, &cases, &policies, settings.seed)?;
    sim::write_run(&run, &out)?;
    let curves = metrics::entropy_curves(&run);
    let evolutions = metrics::confidence_evolution(&run);
    print!("{}", metrics::summary(&run, &curves, &evolutions));
    eprintln!("wrote {} and {} in {}", sim::RUN_FILE, sim::CASES_CSV, out.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let path = if args.run.is_dir() { args.run.join(sim::RUN_FILE) } else { args.run.clone() };
    let run = sim::read_run(&path)?;
    let out = args.out.unwrap_or_else(|| path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    let curves = metrics::entropy_curves(&run);
    let evolutions = metrics::confidence_evolution(&run);
    metrics::emit_report(&run, &curves, &evolutions, &out)?;
    print!("{}", metrics::summary(&run, &curves, &evolutions));
    eprintln!(
        "wrote {}, {} and {} in {}",
        metrics::ENTROPY_CSV,
        metrics::CONFIDENCE_CSV,
        metrics::SUMMARY_TXT,
        out.display()
    );
    Ok(())
}

fn serve(settings: &Settings, args: ServeArgs) -> Result<()> {
    let file = &settings.file.serve;
    let addr: SocketAddr = args
        .addr
        .or_else(|| file.addr.clone())
        .unwrap_or_else(|| DEFAULT_ADDR.to_string())
        .parse()
        .context("--addr must be host:port")?;
    let mut config = ServiceConfig::new(settings.engine_config()?);
    config.transcript_dir = Some(
        args.transcripts
            .or_else(|| file.transcripts.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_TRANSCRIPTS)),
    );
    config.ui_dir = args.ui.or_else(|| file.ui.clone());
    if let Some(secs) = args.ttl_secs.or(file.ttl_secs) {
        config.ttl = Duration::from_secs(secs);
    }
    config.cors_origins =
        if args.cors_origins.is_empty() { file.cors_origins.clone() } else { args.cors_origins };
    let app = Arc::new(AppState::from_config(config)?);
    let runtime = tokio::runtime::Runtime::new()?;
    eprintln!("serving on http://{addr}");
    runtime.block_on(patience_service::serve(addr, app))?;
    Ok(())
}
