//! Command line for the encrypted inference stack.
//!
//! Typical flow:
//!   enshroud config --profile desk > run.json
//!   enshroud keygen --config run.json --out-dir keys
//!   enshroud gen-weights --config run.json --out layer.ensw
//!   enshroud encrypt --config run.json --keys keys/secret.ensk --input x.csv --out x.ensm
//!   enshroud infer --config run.json --keys keys/eval.ensk --weights layer.ensw \
//!       --input x.ensm --out y.ensm --kernel layer
//!   enshroud decrypt --config run.json --keys keys/secret.ensk --input y.ensm --out y.csv
//!
//! `serve` and `client` run the same inference over a socket: one request,
//! one response, the server never sees a secret key.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use enshroud::approx::fit_sigmoid;
use enshroud::blocks::{rmsnorm, run_kernel, FittedSet, LayerWeights};
use enshroud::config::{Kernel, RunConfig};
use enshroud::engine::RefreshPolicy;
use enshroud::io;
use enshroud::linalg::{ccmm_with, pcmm, ElementAccessor};
use enshroud::metrics::{render_records, render_table, CounterSnapshot};
use enshroud::packing::{pack_columns, unpack, PackedMatrix, TernaryMatrix};
use enshroud::reference;
use enshroud::{BackendKind, Engine, KeyMaterial};

#[derive(Parser)]
#[command(
    name = "enshroud",
    version,
    about = "Non-interactive encrypted inference for a toy ternary-weight transformer layer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON); defaults to the desk profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured backend.
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report style for stage output.
    #[arg(long, default_value = "table")]
    report: ReportStyle,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum ReportStyle {
    Table,
    Records,
}

#[derive(Subcommand)]
enum Command {
    /// Print a run configuration to stdout.
    Config {
        /// desk (N'=2^12) or layer (N'=2^13, full-layer depth).
        #[arg(long, default_value = "desk")]
        profile: String,
    },
    /// Generate key material and write secret + evaluation key files.
    Keygen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "keys")]
        out_dir: PathBuf,
    },
    /// Emit a random ternary layer for the configured dimensions.
    GenWeights {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "layer.ensw")]
        out: PathBuf,
    },
    /// Pack and encrypt a CSV matrix into a ciphertext-matrix file.
    Encrypt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "input.ensm")]
        out: PathBuf,
    },
    /// Decrypt a ciphertext-matrix file back to CSV.
    Decrypt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "output.csv")]
        out: PathBuf,
    },
    /// Run one kernel (or the full layer) over an encrypted input.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "output.ensm")]
        out: PathBuf,
        #[arg(long, default_value = "layer")]
        kernel: Kernel,
    },
    /// Sweep kernel sizes and report counters, levels, time and error.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated square sizes (s = d = m).
        #[arg(long, default_value = "4,8,16")]
        sizes: String,
        /// Comma-separated kernels: pcmm, ccmm, sigmoid, rmsnorm.
        #[arg(long, default_value = "pcmm,ccmm,sigmoid,rmsnorm")]
        kernels: String,
    },
    /// Listen for one-shot inference requests; needs evaluation keys only.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7768")]
        listen: String,
        #[arg(long, default_value = "layer")]
        kernel: Kernel,
        /// Exit after serving this many requests (0 = forever).
        #[arg(long, default_value_t = 0)]
        max_requests: u64,
    },
    /// Encrypt a CSV input, send it to a server, decrypt the reply.
    Client {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        connect: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "output.csv")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Config { profile } => cmd_config(&profile),
        Command::Keygen { common, out_dir } => cmd_keygen(&common, &out_dir),
        Command::GenWeights { common, out } => cmd_gen_weights(&common, &out),
        Command::Encrypt {
            common,
            keys,
            input,
            out,
        } => cmd_encrypt(&common, &keys, &input, &out),
        Command::Decrypt {
            common,
            keys,
            input,
            out,
        } => cmd_decrypt(&common, &keys, &input, &out),
        Command::Infer {
            common,
            keys,
            weights,
            input,
            out,
            kernel,
        } => cmd_infer(&common, &keys, &weights, &input, &out, kernel),
        Command::Bench {
            common,
            sizes,
            kernels,
        } => cmd_bench(&common, &sizes, &kernels),
        Command::Serve {
            common,
            keys,
            weights,
            listen,
            kernel,
            max_requests,
        } => cmd_serve(&common, &keys, &weights, &listen, kernel, max_requests),
        Command::Client {
            common,
            keys,
            connect,
            input,
            out,
        } => cmd_client(&common, &keys, &connect, &input, &out),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_json(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => RunConfig::desk(),
    };
    if let Some(backend) = common.backend {
        cfg.backend = backend;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.params.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_keys(path: &Path) -> Result<KeyMaterial> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(io::read_key_material(&bytes)?)
}

fn read_csv_matrix(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    let mut cols = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .with_context(|| format!("{}:{}: bad number `{v}`", path.display(), lineno + 1))
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                bail!("{}:{}: ragged row", path.display(), lineno + 1)
            }
            _ => {}
        }
        rows.push(row);
    }
    let cols = cols.context("empty matrix")?;
    let s = rows.len();
    Ok((rows.into_iter().flatten().collect(), s, cols))
}

fn write_csv_matrix(path: &Path, m: &[f64], rows: usize, cols: usize) -> Result<()> {
    let mut out = String::new();
    for i in 0..rows {
        let row: Vec<String> = (0..cols)
            .map(|j| format!("{:.10}", m[i * cols + j]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn emit_report(common: &Common, engine: &Engine) {
    let records = engine.tracker().records();
    match common.report {
        ReportStyle::Table => print!("{}", render_table(&records)),
        ReportStyle::Records => print!("{}", render_records(&records)),
    }
}

fn cmd_config(profile: &str) -> Result<()> {
    let cfg = match profile {
        "desk" => RunConfig::desk(),
        "layer" => RunConfig::layer_profile(),
        other => bail!("unknown profile `{other}` (expected desk or layer)"),
    };
    println!("{}", cfg.to_json());
    Ok(())
}

fn cmd_keygen(common: &Common, out_dir: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let started = Instant::now();
    let km = KeyMaterial::generate(&cfg.params, cfg.backend, true)?;
    fs::create_dir_all(out_dir)?;
    let secret_path = out_dir.join("secret.ensk");
    let eval_path = out_dir.join("eval.ensk");
    fs::write(&secret_path, io::write_key_material(&km, true))?;
    fs::write(&eval_path, io::write_key_material(&km, false))?;
    eprintln!(
        "key id {:#018x} ({}, N'={}, L={}, K={}) in {:.1}s",
        km.key_id,
        cfg.backend,
        cfg.params.ring_degree,
        cfg.params.max_level,
        cfg.params.refresh_cost,
        started.elapsed().as_secs_f64()
    );
    eprintln!("note: {}", cfg.params.security_note);
    eprintln!(
        "wrote {} and {}",
        secret_path.display(),
        eval_path.display()
    );
    Ok(())
}

fn cmd_gen_weights(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let w = LayerWeights::random(cfg.model.dim, cfg.model.ffn_dim, &mut rng);
    fs::write(out, io::write_weights(&w))?;
    eprintln!(
        "wrote {} (d={}, ffn={}, seed {})",
        out.display(),
        cfg.model.dim,
        cfg.model.ffn_dim,
        cfg.seed
    );
    Ok(())
}

fn cmd_encrypt(common: &Common, keys: &Path, input: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let engine = Engine::new(Arc::new(load_keys(keys)?))?;
    let (x, s, d) = read_csv_matrix(input)?;
    let pm = pack_columns(&engine, &x, s, d)?;
    fs::write(out, io::write_packed_matrix(&pm))?;
    eprintln!(
        "encrypted {s}x{d} matrix -> {} (slot utilization {:.1}%)",
        out.display(),
        100.0 * pm.slot_utilization(&engine)
    );
    let _ = cfg;
    Ok(())
}

fn cmd_decrypt(common: &Common, keys: &Path, input: &Path, out: &Path) -> Result<()> {
    let _cfg = load_config(common)?;
    let km = load_keys(keys)?;
    if !km.can_decrypt() {
        bail!("{} holds no secret key", keys.display());
    }
    let engine = Engine::new(Arc::new(km))?;
    let pm = io::read_packed_matrix(&fs::read(input)?)?;
    let m = unpack(&engine, &pm)?;
    write_csv_matrix(out, &m, pm.nrows(), pm.ncols())?;
    eprintln!(
        "decrypted {}x{} matrix -> {}",
        pm.nrows(),
        pm.ncols(),
        out.display()
    );
    Ok(())
}

fn cmd_infer(
    common: &Common,
    keys: &Path,
    weights: &Path,
    input: &Path,
    out: &Path,
    kernel: Kernel,
) -> Result<()> {
    let cfg = load_config(common)?;
    let engine = Engine::new(Arc::new(load_keys(keys)?))?;
    engine.set_refresh_policy(RefreshPolicy::ScopedOnly);
    let w = io::read_weights(&fs::read(weights)?)?;
    let pm = io::read_packed_matrix(&fs::read(input)?)?;
    let started = Instant::now();
    let result = run_kernel(&engine, &pm, &w, &cfg.layer_config()?, kernel)?;
    let elapsed = started.elapsed();
    fs::write(out, io::write_packed_matrix(&result))?;
    emit_report(common, &engine);
    eprintln!(
        "{kernel} over {}x{} in {:.2}s -> {}",
        pm.nrows(),
        pm.ncols(),
        elapsed.as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn cmd_bench(common: &Common, sizes: &str, kernels: &str) -> Result<()> {
    let cfg = load_config(common)?;
    let keys = Arc::new(KeyMaterial::generate(&cfg.params, cfg.backend, true)?);
    let engine = Engine::new(keys)?;
    let sizes: Vec<usize> = sizes
        .split(',')
        .map(|v| v.trim().parse().context("bad size"))
        .collect::<Result<_>>()?;
    let kernels: Vec<String> = kernels.split(',').map(|k| k.trim().to_string()).collect();

    println!(
        "{:<10} {:>5} {:>7} {:>9} {:>9} {:>9} {:>9} {:>10} {:>11}",
        "kernel", "size", "levels", "mult", "pmult", "add+sub", "rot", "wall_ms", "max_err"
    );
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    for kernel in &kernels {
        for &n in &sizes {
            let x: Vec<f64> = (0..n * n)
                .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                .collect();
            let pm = pack_columns(&engine, &x, n, n)?;
            let before = engine.counters().snapshot();
            let entry = pm.consumed();
            let started = Instant::now();
            let (out, oracle): (PackedMatrix, Vec<f64>) = match kernel.as_str() {
                "pcmm" => {
                    let w = TernaryMatrix::random(n, n, &mut rng);
                    let out = pcmm(&engine, &pm, &w)?;
                    (out, reference::matmul(&x, &w.to_f64(), n, n, n))
                }
                "ccmm" => {
                    let out = ccmm_with(
                        &engine,
                        &pm,
                        &ElementAccessor::transposed(&pm),
                        None,
                        cfg.extraction,
                    )?;
                    let want = reference::matmul(&x, &reference::transpose(&x, n, n), n, n, n);
                    (out, want)
                }
                // The softmax replacement: elementwise fitted sigmoid.
                "sigmoid" => {
                    let fit = fit_sigmoid(
                        cfg.bias(),
                        cfg.profiles.sigmoid.domain,
                        cfg.profiles.sigmoid.degree,
                    )?;
                    let cols = pm
                        .cols
                        .iter()
                        .map(|c| enshroud::approx::ps_eval(&engine, c, &fit))
                        .collect::<enshroud::Result<Vec<_>>>()?;
                    let out = PackedMatrix { cols, rows: n };
                    let want: Vec<f64> = x.iter().map(|&v| fit.eval(v)).collect();
                    (out, want)
                }
                "rmsnorm" => {
                    let profiles = cfg.profiles;
                    let fits = FittedSet::new(&profiles, 0.0)?;
                    let gamma = vec![1.0; n];
                    let out = rmsnorm(&engine, &pm, &gamma, cfg.eps, &fits)?;
                    (out, reference::rmsnorm(&x, &gamma, cfg.eps, n, n))
                }
                other => bail!("unknown bench kernel `{other}`"),
            };
            let wall = started.elapsed().as_secs_f64() * 1e3;
            let diff = CounterSnapshot::diff(&before, &engine.counters().snapshot());
            let err = if engine.keys().can_decrypt() {
                let got = unpack(&engine, &out)?;
                got.iter()
                    .zip(&oracle)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            } else {
                f64::NAN
            };
            println!(
                "{:<10} {:>5} {:>7} {:>9} {:>9} {:>9} {:>9} {:>10.1} {:>11.2e}",
                kernel,
                n,
                out.consumed().saturating_sub(entry),
                diff.mult,
                diff.pmult,
                diff.add + diff.sub,
                diff.rot,
                wall,
                err
            );
        }
    }
    if common.report == ReportStyle::Records {
        emit_report(common, &engine);
    }
    Ok(())
}

fn cmd_serve(
    common: &Common,
    keys: &Path,
    weights: &Path,
    listen: &str,
    kernel: Kernel,
    max_requests: u64,
) -> Result<()> {
    let cfg = load_config(common)?;
    let km = load_keys(keys)?;
    if km.secret.is_some() {
        bail!("refusing to serve with a secret key loaded; pass the evaluation key file");
    }
    let w = io::read_weights(&fs::read(weights)?)?;
    let server = enshroud::net::Server::new(Arc::new(km), cfg, w, kernel)?;
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    eprintln!(
        "serving {kernel} on {} (one request per connection)",
        listener.local_addr()?
    );
    let mut served = 0u64;
    loop {
        match server.serve_one(&listener) {
            Ok(()) => eprintln!("request served"),
            Err(e) => eprintln!("request failed: {e}"),
        }
        served += 1;
        if max_requests > 0 && served >= max_requests {
            return Ok(());
        }
    }
}

fn cmd_client(common: &Common, keys: &Path, connect: &str, input: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let km = load_keys(keys)?;
    if !km.can_decrypt() {
        bail!("client needs the secret key file to decrypt the reply");
    }
    let engine = Engine::new(Arc::new(km))?;
    let (x, s, d) = read_csv_matrix(input)?;
    let pm = pack_columns(&engine, &x, s, d)?;
    let started = Instant::now();
    let reply = enshroud::net::request(connect, &cfg, engine.key_id(), &pm)?;
    let elapsed = started.elapsed();
    let m = unpack(&engine, &reply.matrix)?;
    write_csv_matrix(out, &m, reply.matrix.nrows(), reply.matrix.ncols())?;
    match common.report {
        ReportStyle::Table => print!("{}", render_table(&reply.records)),
        ReportStyle::Records => print!("{}", reply.report),
    }
    eprintln!(
        "round trip in {:.2}s; decrypted {}x{} -> {}",
        elapsed.as_secs_f64(),
        reply.matrix.nrows(),
        reply.matrix.ncols(),
        out.display()
    );
    Ok(())
}
