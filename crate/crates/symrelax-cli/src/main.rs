//! Command-line driver: wires the parser, deduction, passes, lowering, and
//! the runtime into reproducible pipelines. Intermediate modules are
//! exchanged as canonical `.srx` text so every pass boundary is inspectable.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use symrelax::deduce::annotate_module;
use symrelax::ir::{Annotation, DType, Module, ShapeSpec};
use symrelax::passes;
use symrelax::symexpr::evaluate;
use symrelax::tensor::Tensor;
use symrelax::text::{annotation_str, parse_module, print_module, rten};
use symrelax::vm::{
    default_library_registry, interpret, lower_to_vm, parse_program, print_program, run_vm,
    RuntimeValue, VMProgram,
};

#[derive(Parser)]
#[command(name = "symrelax", version, about = "Compiler driver for .srx tensor programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and type-check a module, reporting deduced check sites.
    Check { file: PathBuf },
    /// Print the module with deduced annotations and check sites.
    Infer { file: PathBuf },
    /// Rewrite operator calls into tensor-program calls.
    Legalize(PassArgs),
    /// Group fusable bindings into sub-functions.
    Fuse(PassArgs),
    /// Merge each fused sub-function into one tensor program.
    FuseTir(PassArgs),
    /// Rewrite matching regions to library calls.
    LowerLibs(PassArgs),
    /// Assign intermediates to explicit storages.
    PlanMemory {
        #[command(flatten)]
        common: PassArgs,
        /// Print the storage plan instead of the module.
        #[arg(long)]
        report: bool,
    },
    /// Compile a planned module to an instruction listing.
    Build(PassArgs),
    /// Execute a program and print its result.
    Run(RunArgs),
    /// Run a preset pass sequence in one step.
    Pipeline {
        file: PathBuf,
        /// Preset name or comma-separated pass list.
        #[arg(long, default_value = "default")]
        preset: String,
        #[arg(long)]
        lib: Vec<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PassArgs {
    file: PathBuf,
    /// Enable only these library patterns (default: all).
    #[arg(long)]
    lib: Vec<String>,
    /// Write here instead of standard output.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    file: PathBuf,
    #[arg(long, default_value = "main")]
    entry: String,
    /// Input value, `name=@file.rten` or an inline literal
    /// `name={"dtype": "f32", "dims": [2], "data": [1, 2]}`.
    #[arg(long = "input")]
    inputs: Vec<String>,
    /// Symbolic binding `name=int`, used to size synthesized inputs and for
    /// interpreter-mode runs.
    #[arg(long = "bind")]
    binds: Vec<String>,
    /// Use the reference interpreter instead of compiling.
    #[arg(long)]
    interpret: bool,
    /// Print `allocs=<n> peak_bytes=<n>` as the final line.
    #[arg(long)]
    trace_alloc: bool,
    /// Seed for synthesizing inputs that were not supplied.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Save the result tensor here.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Diag(String),
}

impl CliError {
    fn code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Diag(_) => ExitCode::from(1),
        }
    }
}

fn diag(e: impl std::fmt::Display) -> CliError {
    CliError::Diag(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::Usage(m) | CliError::Diag(m) => m,
            };
            eprintln!("error: {}", msg);
            e.code()
        }
    }
}

fn read_module(path: &PathBuf) -> Result<Module, CliError> {
    let src = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e)))?;
    parse_module(&src).map_err(diag)
}

fn emit(text: &str, output: &Option<PathBuf>) -> Result<(), CliError> {
    match output {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Diag(format!("{}: {}", path.display(), e))),
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}

fn patterns(lib: &[String]) -> Result<Vec<passes::LibraryPattern>, CliError> {
    let all = passes::default_registry();
    if lib.is_empty() {
        return Ok(all);
    }
    let mut out = Vec::new();
    for name in lib {
        match all.iter().find(|p| &p.name == name) {
            Some(p) => out.push(p.clone()),
            None => return Err(CliError::Usage(format!("unknown library pattern `{}`", name))),
        }
    }
    Ok(out)
}

const PASS_NAMES: &[&str] =
    &["legalize", "fuse", "fuse-tir", "lower-libs", "plan-memory", "build"];

fn apply_passes(
    m: &Module,
    names: &[&str],
    lib: &[String],
) -> Result<(Module, Option<VMProgram>), CliError> {
    let (mut m, _) = annotate_module(m).map_err(diag)?;
    for name in names {
        m = match *name {
            "legalize" => passes::legalize(&m).map_err(diag)?,
            "fuse" => passes::fuse_ops(&m, &[]).map_err(diag)?,
            "fuse-tir" => passes::fuse_tensor_ir(&m).map_err(diag)?,
            "lower-libs" => passes::lower_to_library(&m, &patterns(lib)?).map_err(diag)?,
            "plan-memory" => passes::plan_memory(&m).map_err(diag)?.0,
            "build" => {
                let p = lower_to_vm(&m).map_err(diag)?;
                return Ok((m, Some(p)));
            }
            other => return Err(CliError::Usage(format!("unknown pass `{}`", other))),
        };
    }
    Ok((m, None))
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Check { file } => {
            let m = read_module(&file)?;
            let (_, sites) = annotate_module(&m).map_err(diag)?;
            println!("ok: {} check sites", sites.len());
            Ok(())
        }
        Cmd::Infer { file } => {
            let m = read_module(&file)?;
            let (am, sites) = annotate_module(&m).map_err(diag)?;
            print!("{}", print_module(&am));
            for s in &sites {
                println!(
                    "// check @{} {}:{}: expected {}, deduced {} ({})",
                    s.id,
                    s.function,
                    s.location,
                    annotation_str(&s.expected),
                    annotation_str(&s.actual),
                    s.reason
                );
            }
            Ok(())
        }
        Cmd::Legalize(a) => one_pass(&a, "legalize"),
        Cmd::Fuse(a) => one_pass(&a, "fuse"),
        Cmd::FuseTir(a) => one_pass(&a, "fuse-tir"),
        Cmd::LowerLibs(a) => one_pass(&a, "lower-libs"),
        Cmd::PlanMemory { common, report } => {
            let m = read_module(&common.file)?;
            let (am, _) = annotate_module(&m).map_err(diag)?;
            let (planned, plan) = passes::plan_memory(&am).map_err(diag)?;
            if report {
                let text = format!("{}storages={}\n", plan.report(), plan.storages.len());
                emit(&text, &common.output)
            } else {
                emit(&print_module(&planned), &common.output)
            }
        }
        Cmd::Build(a) => {
            let m = read_module(&a.file)?;
            let (am, _) = annotate_module(&m).map_err(diag)?;
            let p = lower_to_vm(&am).map_err(diag)?;
            emit(&print_program(&p), &a.output)
        }
        Cmd::Run(a) => run_cmd(a),
        Cmd::Pipeline { file, preset, lib, output } => {
            let names: Vec<&str> = match preset.as_str() {
                "default" => vec!["legalize", "fuse", "fuse-tir", "lower-libs", "plan-memory", "build"],
                list => list.split(',').map(str::trim).collect(),
            };
            for n in &names {
                if !PASS_NAMES.contains(n) {
                    return Err(CliError::Usage(format!("unknown pass `{}`", n)));
                }
            }
            let m = read_module(&file)?;
            let (m, prog) = apply_passes(&m, &names, &lib)?;
            match prog {
                Some(p) => emit(&print_program(&p), &output),
                None => emit(&print_module(&m), &output),
            }
        }
    }
}

fn one_pass(a: &PassArgs, name: &str) -> Result<(), CliError> {
    let m = read_module(&a.file)?;
    let (m, _) = apply_passes(&m, &[name], &a.lib)?;
    emit(&print_module(&m), &a.output)
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn parse_binds(binds: &[String]) -> Result<HashMap<String, i64>, CliError> {
    let mut out = HashMap::new();
    for b in binds {
        let (name, value) = b
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--bind wants name=int, got `{}`", b)))?;
        let v: i64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("--bind value `{}` is not an integer", value)))?;
        out.insert(name.trim().to_string(), v);
    }
    Ok(out)
}

fn parse_inputs(inputs: &[String]) -> Result<HashMap<String, Tensor>, CliError> {
    let mut out = HashMap::new();
    for spec in inputs {
        let (name, value) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--input wants name=value, got `{}`", spec)))?;
        let t = if let Some(path) = value.strip_prefix('@') {
            rten::load(std::path::Path::new(path)).map_err(diag)?
        } else {
            rten::parse_literal(value).map_err(diag)?
        };
        out.insert(name.trim().to_string(), t);
    }
    Ok(out)
}

/// Deterministic xorshift generator, so synthesized inputs depend only on the
/// seed and parameter order.
struct Rng(u64);

impl Rng {
    fn next(&mut self) -> u64 {
        let mut x = self.0.wrapping_add(0x9e3779b97f4a7c15);
        self.0 = x;
        x ^= x >> 30;
        x = x.wrapping_mul(0xbf58476d1ce4e5b9);
        x ^= x >> 27;
        x = x.wrapping_mul(0x94d049bb133111eb);
        x ^ (x >> 31)
    }

    fn f32_unit(&mut self) -> f32 {
        (self.next() >> 40) as f32 / (1u64 << 24) as f32 * 2.0 - 1.0
    }
}

fn synthesize(
    name: &str,
    ann: &Annotation,
    env: &HashMap<u32, i64>,
    rng: &mut Rng,
) -> Result<RuntimeValue, CliError> {
    match ann {
        Annotation::Tensor { shape: ShapeSpec::Known(dims), dtype } => {
            let mut shape = Vec::with_capacity(dims.len());
            for d in dims {
                let v = evaluate(d, env).map_err(|_| {
                    CliError::Usage(format!(
                        "cannot size input `{}`: dimension {} needs a --bind",
                        name, d
                    ))
                })?;
                shape.push(v);
            }
            let dt = dtype.unwrap_or(DType::F32);
            let t = Tensor::zeros(dt, shape);
            for i in 0..t.num_elements() {
                match dt {
                    DType::F32 => t.set_f32(i, rng.f32_unit()),
                    DType::I64 => t.set_i64(i, (rng.next() % 10) as i64),
                    DType::Bool => t.set_bool(i, rng.next() % 2 == 0),
                }
            }
            Ok(RuntimeValue::Tensor(t))
        }
        Annotation::Shape { spec: ShapeSpec::Known(dims) } => {
            let mut out = Vec::with_capacity(dims.len());
            for d in dims {
                out.push(evaluate(d, env).map_err(|_| {
                    CliError::Usage(format!(
                        "cannot synthesize shape input `{}`: {} needs a --bind",
                        name, d
                    ))
                })?);
            }
            Ok(RuntimeValue::Shape(out))
        }
        _ => Err(CliError::Usage(format!(
            "input `{}` has no concrete annotation; supply it with --input",
            name
        ))),
    }
}

fn run_cmd(a: RunArgs) -> Result<(), CliError> {
    if a.interpret && a.trace_alloc {
        return Err(CliError::Usage(
            "--trace-alloc reports compiled-run statistics; drop --interpret".into(),
        ));
    }
    let src = std::fs::read_to_string(&a.file)
        .map_err(|e| CliError::Usage(format!("{}: {}", a.file.display(), e)))?;
    let binds = parse_binds(&a.binds)?;
    let supplied = parse_inputs(&a.inputs)?;

    // A listing runs directly; module text goes through the default pipeline.
    if src.trim_start().starts_with(".module") {
        let p = parse_program(&src).map_err(diag)?;
        let f = p
            .funcs
            .get(&a.entry)
            .ok_or_else(|| CliError::Diag(format!("unknown entry `{}`", a.entry)))?;
        if supplied.len() != f.num_params {
            return Err(CliError::Usage(format!(
                "entry `{}` wants {} inputs; a listing has no annotations to synthesize from",
                a.entry, f.num_params
            )));
        }
        // listing parameters are positional; inputs are taken in given order
        let args: Vec<RuntimeValue> = a
            .inputs
            .iter()
            .map(|s| {
                let name = s.split_once('=').map(|(n, _)| n.trim()).unwrap_or("");
                RuntimeValue::Tensor(supplied[name].clone())
            })
            .collect();
        let registry = default_library_registry();
        let (value, stats) = run_vm(&p, &a.entry, &args, &registry).map_err(diag)?;
        return finish_run(&a, value, Some(stats));
    }

    let m = parse_module(&src).map_err(diag)?;
    let f = m
        .graph_funcs
        .get(&a.entry)
        .ok_or_else(|| CliError::Diag(format!("unknown entry `{}`", a.entry)))?;
    let mut env: HashMap<u32, i64> = HashMap::new();
    for v in &f.sym_vars {
        if let Some(val) = binds.get(&v.name) {
            env.insert(v.id, *val);
        }
    }
    let mut rng = Rng(a.seed);
    let mut args = Vec::with_capacity(f.params.len());
    for (name, ann) in &f.params {
        match supplied.get(name) {
            Some(t) => args.push(RuntimeValue::Tensor(t.clone())),
            None => args.push(synthesize(name, ann, &env, &mut rng)?),
        }
    }

    if a.interpret {
        let value = interpret(&m, &a.entry, &args, &env).map_err(diag)?;
        return finish_run(&a, value, None);
    }
    let names = ["legalize", "fuse", "fuse-tir", "lower-libs", "plan-memory", "build"];
    let (_, prog) = apply_passes(&m, &names, &[])?;
    let p = prog.expect("build is in the pass list");
    let registry = default_library_registry();
    let (value, stats) = run_vm(&p, &a.entry, &args, &registry).map_err(diag)?;
    finish_run(&a, value, Some(stats))
}

fn finish_run(
    a: &RunArgs,
    value: RuntimeValue,
    stats: Option<symrelax::vm::ExecStats>,
) -> Result<(), CliError> {
    if let Some(path) = &a.output {
        let RuntimeValue::Tensor(t) = &value else {
            return Err(CliError::Diag(format!(
                "result is {}, not a tensor; cannot save it",
                value.describe()
            )));
        };
        rten::save(path, t).map_err(diag)?;
    }
    println!("{}", value);
    if a.trace_alloc {
        let s = stats.expect("trace-alloc implies a compiled run");
        println!("allocs={} peak_bytes={}", s.allocs, s.peak_bytes);
    }
    Ok(())
}
