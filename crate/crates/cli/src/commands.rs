use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use log::info;

use smmsb::admm::AdmmConfig;
use smmsb::data::{holdout_split, load_network_with, DataError, LoadOptions, Network, Split};
use smmsb::eval::{evaluate, log_likelihood, EvalReport};
use smmsb::model::{generate_network, BatchTrainer, EmConfig, ModelError, ModelState};
use smmsb::rules::{parse_rules, print_rules, RuleSet};
use smmsb::server::{work, Server, ServerConfig, WorkerConfig};
use smmsb::stochastic::{train_stochastic_with, StepSchedule, StochasticConfig, StochasticContext};
use smmsb::weights::{learn_weights, WeightError, WeightLearnConfig};

use crate::{
    Command, DataArgs, EvaluateArgs, GenerateArgs, LearnArgs, ModelArgs, ReportFormat, ServeArgs, SplitArgs,
    StochasticArgs, StochasticFlags, TrainArgs, WorkArgs,
};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<smmsb::Error> for CliError {
    fn from(e: smmsb::Error) -> Self {
        use smmsb::Error as E;
        let config = matches!(
            &e,
            E::Config(_)
                | E::Model(ModelError::BadHyper(_) | ModelError::NoCommunities)
                | E::Data(DataError::BadFraction(_))
                | E::Weights(WeightError::BadConfig(_) | WeightError::NoLearnable)
        );
        match (config, e) {
            (true, E::Config(m)) => CliError::Config(m),
            (true, e) => CliError::Config(e.to_string()),
            (false, e) => CliError::Runtime(e.to_string()),
        }
    }
}

macro_rules! from_module {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::from(smmsb::Error::from(e))
            }
        }
    )*};
}
from_module!(
    smmsb::data::DataError,
    smmsb::rules::RuleError,
    smmsb::model::ModelError,
    smmsb::eval::EvalError,
    smmsb::server::ServerError
);

type Result<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path, e: io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::TrainStochastic(a) => train_stochastic(a),
        Command::LearnWeights(a) => learn(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Generate(a) => generate(a),
        Command::Serve(a) => serve(a),
        Command::Work(a) => work_cmd(a),
    }
}

fn load_data(d: &DataArgs) -> Result<Network> {
    let opts = LoadOptions {
        undirected: d.undirected,
    };
    Ok(load_network_with(&d.edges, d.features.as_deref(), &d.target, opts)?)
}

fn load_rules(path: Option<&Path>) -> Result<RuleSet> {
    match path {
        None => Ok(RuleSet::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            Ok(parse_rules(&text).map_err(|e| CliError::Runtime(format!("rules: {}: {e}", p.display())))?)
        }
    }
}

fn make_split(net: &Network, s: &SplitArgs, seed: u64) -> Result<Split> {
    let split = match &s.split {
        Some(p) => Split::read_json(net, p)?,
        None if s.test_fraction == 0.0 => Split::all_train(net),
        None => holdout_split(net, s.test_fraction, seed)?,
    };
    if let Some(out) = &s.split_out {
        split.write_json(net, out)?;
    }
    Ok(split)
}

fn em_config(m: &ModelArgs) -> Result<EmConfig> {
    let cfg = EmConfig {
        k: m.k,
        alpha: m.alpha,
        beta_sum: m.beta_sum,
        seed: m.seed,
        tol: m.tol,
        max_iters: m.max_iters,
        admm: AdmmConfig {
            rho: m.admm_rho,
            eps_abs: m.admm_eps_abs,
            eps_rel: m.admm_eps_rel,
            max_iters: m.admm_max_iters,
        },
        grounding_cap: m.grounding_cap,
        initial_weight: m.initial_weight,
        latent_init: m.latent_init,
    };
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

fn stochastic_config(m: &ModelArgs, s: &StochasticFlags) -> Result<StochasticConfig> {
    let schedule = match s.constant_step {
        Some(r) => StepSchedule::Constant(r),
        None => StepSchedule::Decay {
            tau0: s.tau0,
            kappa: s.kappa,
        },
    };
    let cfg = StochasticConfig {
        em: em_config(m)?,
        node_fraction: s.node_fraction,
        iterations: s.iterations,
        schedule,
        trace_every: s.trace_every,
    };
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

fn check_fraction(s: &SplitArgs) -> Result<()> {
    if s.split.is_none() && !(0.0..1.0).contains(&s.test_fraction) {
        return Err(CliError::Config(format!(
            "test fraction must lie in [0, 1), got {}",
            s.test_fraction
        )));
    }
    Ok(())
}

fn report(state: &ModelState, net: &Network, split: &Split) -> Result<()> {
    let r = evaluate(state, net, split)?;
    println!("{}", EvalReport::tsv_header());
    println!("{}", r.tsv_line());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = em_config(&a.model)?;
    check_fraction(&a.split)?;
    let net = load_data(&a.data)?;
    let rules = load_rules(a.model.rules.as_deref())?;
    let split = make_split(&net, &a.split, cfg.seed)?;
    let trainer = BatchTrainer::new(&net, &split, &rules, &cfg)?;
    if let Some(p) = &a.grounding_dump {
        let mut w = create(p)?;
        trainer.prior.grounding.dump(&mut w).map_err(|e| io_error(p, e))?;
        w.flush().map_err(|e| io_error(p, e))?;
    }
    let train_net = trainer.train_net.clone();
    let mut trace = create(&a.trace)?;
    writeln!(trace, "iteration\tbound\ttrain_ll").map_err(|e| io_error(&a.trace, e))?;
    let mut werr = None;
    let out = trainer
        .run_with(|it, state, r| {
            let ll = log_likelihood(state, &train_net, &split.train);
            if let Err(e) = writeln!(trace, "{}\t{r}\t{ll}", it + 1) {
                werr.get_or_insert(e);
            }
        })
        .map_err(smmsb::Error::from)?;
    if let Some(e) = werr {
        return Err(io_error(&a.trace, e));
    }
    trace.flush().map_err(|e| io_error(&a.trace, e))?;
    info!(
        "{} after {} iterations",
        if out.converged { "converged" } else { "stopped" },
        out.trace.len()
    );
    out.state.save(&a.out)?;
    report(&out.state, &net, &split)
}

fn train_stochastic(a: StochasticArgs) -> Result<()> {
    let cfg = stochastic_config(&a.model, &a.stochastic)?;
    check_fraction(&a.split)?;
    let net = load_data(&a.data)?;
    let rules = load_rules(a.model.rules.as_deref())?;
    let split = make_split(&net, &a.split, cfg.em.seed)?;
    let mut trace = create(&a.trace)?;
    writeln!(trace, "iteration\trho\ttrain_ll\tseconds").map_err(|e| io_error(&a.trace, e))?;
    let mut werr = None;
    let out = train_stochastic_with(&net, &split, &rules, &cfg, |rec, _| {
        if let Err(e) = writeln!(trace, "{}", rec.tsv_line()) {
            werr.get_or_insert(e);
        }
    })?;
    if let Some(e) = werr {
        return Err(io_error(&a.trace, e));
    }
    trace.flush().map_err(|e| io_error(&a.trace, e))?;
    out.state.save(&a.out)?;
    report(&out.state, &net, &split)
}

fn learn(a: LearnArgs) -> Result<()> {
    let em = em_config(&a.model)?;
    check_fraction(&a.split)?;
    let wcfg = WeightLearnConfig {
        learn_rate: a.learn_rate,
        iterations: a.weight_iterations,
        floor: a.weight_floor,
        cap: a.weight_cap,
    };
    wcfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let net = load_data(&a.data)?;
    let rules = load_rules(a.model.rules.as_deref())?;
    let split = make_split(&net, &a.split, em.seed)?;
    let out = learn_weights(&net, &split, &rules, &em, &wcfg)?;
    let mut trace = create(&a.trace)?;
    let mut header = String::from("iteration\tbound");
    for r in 0..rules.rules.len() {
        header.push_str(&format!("\tw{}", r + 1));
    }
    let body: String = out.trace.iter().map(|s| s.tsv_line() + "\n").collect();
    write!(trace, "{header}\n{body}")
        .and_then(|_| trace.flush())
        .map_err(|e| io_error(&a.trace, e))?;
    std::fs::write(&a.weights_out, print_rules(&rules.with_weights(&out.weights)))
        .map_err(|e| io_error(&a.weights_out, e))?;
    out.state.save(&a.out)?;
    report(&out.state, &net, &split)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    check_fraction(&a.split)?;
    let state = ModelState::load(&a.model)?;
    let net = load_data(&a.data)?;
    state.check_network(&net)?;
    let split = make_split(&net, &a.split, a.seed)?;
    let r = evaluate(&state, &net, &split)?;
    match a.format {
        ReportFormat::Tsv => {
            if a.header {
                println!("{}", EvalReport::tsv_header());
            }
            println!("{}", r.tsv_line());
        }
        ReportFormat::Kv => print!("{}", r.key_values()),
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let state = ModelState::load(&a.model)?;
    let net = generate_network(&state, a.seed, &a.relation);
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            net.write_edges(&mut w).and_then(|_| w.flush()).map_err(|e| io_error(p, e))
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            net.write_edges(&mut w)
                .and_then(|_| w.flush())
                .map_err(|e| CliError::Runtime(format!("stdout: {e}")))
        }
    }
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = stochastic_config(&a.model, &a.stochastic)?;
    check_fraction(&a.split)?;
    let net = load_data(&a.data)?;
    let rules = load_rules(a.model.rules.as_deref())?;
    let split = make_split(&net, &a.split, cfg.em.seed)?;
    let (_, state, stats) = StochasticContext::new(&net, &split, &rules, &cfg)?;
    let scfg = ServerConfig {
        workers_expected: a.workers_expected,
        max_staleness: a.max_staleness,
        checkpoint: Some(a.out.clone()),
        checkpoint_every: a.checkpoint_every,
        ..Default::default()
    };
    let server = Server::bind(a.bind.as_str(), stats, state, &cfg, scfg)?;
    let addr = server.local_addr().map_err(|e| CliError::Runtime(format!("bind: {e}")))?;
    println!("listening {addr}");
    io::stdout().flush().ok();
    let out = server.run()?;
    let m = &out.metrics;
    println!("applied={}", m.applied);
    println!("stale_dropped={}", m.stale_dropped);
    println!("malformed={}", m.malformed);
    println!("max_staleness={}", m.max_staleness_seen);
    Ok(())
}

fn work_cmd(a: WorkArgs) -> Result<()> {
    let cfg = stochastic_config(&a.model, &a.stochastic)?;
    check_fraction(&a.split)?;
    let net = load_data(&a.data)?;
    let rules = load_rules(a.model.rules.as_deref())?;
    let split = make_split(&net, &a.split, cfg.em.seed)?;
    let (ctx, state, _) = StochasticContext::new(&net, &split, &rules, &cfg)?;
    let wcfg = WorkerConfig {
        worker_id: a.worker_id,
        connect_attempts: a.connect_attempts,
        backoff: std::time::Duration::from_millis(a.backoff_ms),
    };
    let r = work(&a.connect, &ctx, state, &wcfg)?;
    println!("pushes={}", r.pushes);
    println!("accepted={}", r.accepted);
    println!("stale={}", r.stale);
    println!("rejected={}", r.rejected);
    Ok(())
}
