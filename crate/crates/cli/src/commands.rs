use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use rlk_core::bench::{bench_stack, BenchConfig, WARMUP};
use rlk_core::conv::{Backend, ConvSpec, ConvWeights};
use rlk_core::erf::{area_ratio, compute_erf, read_pnm, render_heatmap, sidecar_path, AreaSource};
use rlk_core::model::{forward, io, reparam_model, ArchSpec, InitOptions, LayerGraph, ModelWeights, WeightBlock};
use rlk_core::reparam::densify_dilated;
use rlk_core::tensor::{Dist, Rng, Shape, Tensor};
use rlk_core::{Error, Pool};
use thiserror::Error;

use crate::{
    exit, AreaOn, BackendArg, BenchArgs, Command, DensifyArgs, ErfArgs, FlopsArgs, ForwardBackend, ModelSource,
    ReparamArgs, RunArgs,
};

/// Largest tolerated `max|a - b| / max|b|` between equivalent models.
pub const VERIFY_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::InvalidParam(_)) => exit::USAGE,
            Failure::Verify(_) | Failure::Core(Error::Checksum { .. }) => exit::VERIFY,
            Failure::Core(_) => exit::RUNTIME,
        }
    }
}

type Outcome = Result<(), Failure>;

pub fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Bench(a) => bench(a),
        Command::Reparam(a) => reparam(a),
        Command::Erf(a) => erf(a),
        Command::Flops(a) => flops(a),
        Command::Run(a) => run(a),
        Command::Densify(a) => densify(a),
    }
}

fn echo(command: &str, pairs: &[(&str, String)]) {
    println!("# rlk {command}");
    for (k, v) in pairs {
        println!("# {k} = {v}");
    }
}

fn opt_path(p: &Option<impl AsRef<Path>>) -> String {
    p.as_ref()
        .map_or_else(|| "-".to_string(), |p| p.as_ref().display().to_string())
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn backend(b: ForwardBackend) -> Backend {
    match b {
        ForwardBackend::Direct => Backend::Direct,
        ForwardBackend::Blocked => Backend::Blocked,
        ForwardBackend::Fft => Backend::Fft,
    }
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|source| {
        Failure::Core(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

/// Resolves `--arch`: a JSON file, or one of the preset names.
pub fn load_arch(arch: &str) -> Result<ArchSpec, Failure> {
    match fs::read_to_string(arch) {
        Ok(text) => Ok(ArchSpec::from_json(&text).map_err(|e| Failure::Usage(format!("{arch}: {e}")))?),
        Err(e) if e.kind() == ErrorKind::NotFound => match arch.to_ascii_lowercase().as_str() {
            "replknet-31b" | "31b" => Ok(ArchSpec::replknet_31b()),
            "replknet-31l" | "31l" => Ok(ArchSpec::replknet_31l()),
            "replknet-xl" | "xl" => Ok(ArchSpec::replknet_xl()),
            "replknet-3" | "3" => Ok(ArchSpec::replknet_3()),
            _ => Err(Failure::Usage(format!(
                "`{arch}` is neither an architecture file nor a preset (replknet-31b, replknet-31l, replknet-xl, replknet-3)"
            ))),
        },
        Err(source) => Err(Error::Io {
            path: arch.into(),
            source,
        }
        .into()),
    }
}

/// Builds the graph and loads or draws its weights.
fn load_model(src: &ModelSource, arch: &ArchSpec) -> Result<(LayerGraph, ModelWeights), Failure> {
    let graph = LayerGraph::build(arch).map_err(|e| Failure::Usage(e.to_string()))?;
    let weights = match &src.weights {
        Some(path) => {
            let (_, w) = io::read_container(path)?;
            w.check_coverage(&graph)?;
            w
        }
        None => ModelWeights::random(
            &graph,
            &mut Rng::new(src.seed),
            InitOptions {
                random_bn: true,
                ..Default::default()
            },
        )?,
    };
    Ok((graph, weights))
}

fn model_pairs(src: &ModelSource, arch: &ArchSpec) -> Vec<(&'static str, String)> {
    vec![
        ("arch", src.arch.clone()),
        ("blocks", list(&arch.blocks)),
        ("channels", list(&arch.channels)),
        ("kernels", list(&arch.kernels)),
        (
            "small_kernel",
            arch.small_kernel.map_or("none".into(), |k| k.to_string()),
        ),
        ("weights", opt_path(&src.weights)),
        ("seed", src.seed.to_string()),
    ]
}

fn bench(a: BenchArgs) -> Outcome {
    let backends = match a.backend {
        BackendArg::Direct => vec![Backend::Direct],
        BackendArg::Blocked => vec![Backend::Blocked],
        BackendArg::Fft => vec![Backend::Fft],
        BackendArg::All => Backend::ALL.to_vec(),
    };
    let cfg = BenchConfig {
        kernels: a.kernels,
        resolutions: a.resolutions,
        batch: a.batch,
        channels: a.channels,
        layers: a.layers,
        backends,
        reps: a.reps as usize,
        warmup: WARMUP,
        threads: a.threads.threads as usize,
        tile: a.tile,
        seed: a.seed,
    };
    cfg.validate()?;
    echo(
        "bench",
        &[
            ("kernels", list(&cfg.kernels)),
            ("resolutions", list(&cfg.resolutions)),
            ("batch", cfg.batch.to_string()),
            ("channels", cfg.channels.to_string()),
            ("layers", cfg.layers.to_string()),
            (
                "backends",
                cfg.backends.iter().map(|b| b.id()).collect::<Vec<_>>().join(","),
            ),
            ("reps", cfg.reps.to_string()),
            ("warmup", cfg.warmup.to_string()),
            ("threads", cfg.threads.to_string()),
            ("tile", cfg.tile.to_string()),
            ("seed", cfg.seed.to_string()),
            ("csv", opt_path(&a.csv)),
        ],
    );
    let report = bench_stack(&cfg)?;
    print!("{}", report.grid());
    match &a.csv {
        Some(path) => write_file(path, &report.to_csv_string())?,
        None => print!("{}", report.to_csv_string()),
    }
    Ok(())
}

/// Largest relative deviation of the deploy form over `n` seeded inputs.
fn verify_equivalence(
    (g, w): (&LayerGraph, &ModelWeights),
    (dg, dw): (&LayerGraph, &ModelWeights),
    n: usize,
    size: usize,
    seed: u64,
    backend: Backend,
) -> Outcome {
    let shape = Shape::new(1, g.input_channels(), size, size)?;
    let rng = Rng::new(seed).fork(0x5eed);
    let mut worst = 0.0f32;
    for i in 0..n {
        let x = Tensor::new_random(shape, &mut rng.fork(i as u64), Dist::Normal { mean: 0.0, std: 1.0 })?;
        let want = forward(g, w, &x, backend)?;
        let got = forward(dg, dw, &x, backend)?;
        let diff = got.zip_with(&want, |p, q| p - q)?.max_abs();
        let rel = diff / want.max_abs().max(f32::MIN_POSITIVE);
        println!("verify {i}: max_rel_err = {rel:.3e}");
        worst = worst.max(if rel.is_nan() { f32::INFINITY } else { rel });
    }
    println!("verify: worst max_rel_err = {worst:.3e} (tolerance {VERIFY_TOLERANCE:e})");
    if worst > VERIFY_TOLERANCE {
        return Err(Failure::Verify(format!(
            "deploy form deviates by {worst:.3e} > {VERIFY_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn reparam(a: ReparamArgs) -> Outcome {
    let arch = load_arch(&a.model.arch)?;
    if a.out.is_none() && a.fused.is_none() {
        return Err(Failure::Usage("one of --out or --fused is required".into()));
    }
    if a.input_size == 0 || (arch.with_head && !a.input_size.is_multiple_of(32)) {
        return Err(Failure::Usage(format!(
            "--input-size must be a positive multiple of 32, got {}",
            a.input_size
        )));
    }
    // Re-verifying an existing file is pointless without inputs.
    let verify = if a.fused.is_some() && a.verify == 0 {
        4
    } else {
        a.verify
    };
    let mut pairs = model_pairs(&a.model, &arch);
    pairs.extend([
        ("out", opt_path(&a.out)),
        ("fused", opt_path(&a.fused)),
        ("save_weights", opt_path(&a.save_weights)),
        ("verify", verify.to_string()),
        ("input_size", a.input_size.to_string()),
        ("backend", backend(a.backend).id().to_string()),
        ("threads", a.threads.threads.to_string()),
    ]);
    echo("reparam", &pairs);

    let pool = Pool::new(a.threads.threads as usize);
    pool.install(|| {
        let (graph, weights) = load_model(&a.model, &arch)?;
        if let Some(path) = &a.save_weights {
            io::save(&graph, &weights, path)?;
        }
        let (dg, dw) = match &a.fused {
            Some(path) => io::load(path)?,
            None => {
                let (dg, dw) = reparam_model(&graph, &weights)?;
                let out = a.out.as_ref().expect("checked above");
                io::save(&dg, &dw, out)?;
                let (p0, m0) = graph.count(224, 224)?;
                let (p1, m1) = dg.count(224, 224)?;
                println!(
                    "converted: {} -> {} nodes, {} -> {} bn, params {p0} -> {p1}, macs@224 {m0} -> {m1}",
                    graph.nodes.len(),
                    dg.nodes.len(),
                    graph.count_kind("bn"),
                    dg.count_kind("bn"),
                );
                (dg, dw)
            }
        };
        if verify > 0 {
            verify_equivalence(
                (&graph, &weights),
                (&dg, &dw),
                verify,
                a.input_size,
                a.model.seed,
                backend(a.backend),
            )?;
        }
        Ok(())
    })
}

fn erf(a: ErfArgs) -> Outcome {
    let mut arch = load_arch(&a.model.arch)?;
    arch.with_head = false;
    if let Some(t) = a.thresholds.iter().find(|t| !(**t > 0.0 && **t <= 100.0)) {
        return Err(Failure::Usage(format!(
            "thresholds are percentages in (0, 100], got {t}"
        )));
    }
    if a.images.is_empty() && a.input_size == 0 {
        return Err(Failure::Usage("--input-size must be positive".into()));
    }
    let source = match a.area_on {
        AreaOn::Raw => AreaSource::Raw,
        AreaOn::Log => AreaSource::Log,
    };
    let mut pairs = model_pairs(&a.model, &arch);
    pairs.extend([
        ("input_size", a.input_size.to_string()),
        (
            "samples",
            if a.images.is_empty() {
                a.samples.to_string()
            } else {
                a.images.len().to_string()
            },
        ),
        (
            "images",
            if a.images.is_empty() {
                "-".into()
            } else {
                list(&a.images.iter().map(|p| p.display()).collect::<Vec<_>>())
            },
        ),
        ("thresholds", list(&a.thresholds)),
        ("area_on", format!("{:?}", a.area_on).to_lowercase()),
        ("heatmap", opt_path(&a.heatmap)),
        ("csv", opt_path(&a.csv)),
        ("backend", backend(a.backend).id().to_string()),
        ("threads", a.threads.threads.to_string()),
    ]);
    echo("erf", &pairs);

    let pool = Pool::new(a.threads.threads as usize);
    pool.install(|| {
        let (graph, weights) = load_model(&a.model, &arch)?;
        let inputs: Vec<Tensor> = if a.images.is_empty() {
            let shape = Shape::new(1, arch.in_channels, a.input_size, a.input_size)?;
            let rng = Rng::new(a.model.seed).fork(0xe5f);
            (0..a.samples as u64)
                .map(|i| Tensor::new_random(shape, &mut rng.fork(i), Dist::Normal { mean: 0.0, std: 1.0 }))
                .collect::<Result<_, _>>()?
        } else {
            a.images
                .iter()
                .map(|p| read_pnm(p)?.to_tensor_channels(arch.in_channels))
                .collect::<Result<_, _>>()?
        };
        let map = compute_erf(&graph, &weights, &inputs, backend(a.backend))?;
        if let Some(path) = &a.heatmap {
            render_heatmap(&map, path)?;
            println!("heatmap: {} (+ {})", path.display(), sidecar_path(path).display());
        }
        let thresholds: Vec<f64> = a.thresholds.iter().map(|t| t / 100.0).collect();
        let report = area_ratio(&map, &thresholds, source)?;
        match &a.csv {
            Some(path) => write_file(path, &report.to_csv_string())?,
            None => print!("{}", report.to_csv_string()),
        }
        Ok(())
    })
}

fn flops(a: FlopsArgs) -> Outcome {
    let arch = load_arch(&a.arch)?;
    if a.resolution == 0 || !a.resolution.is_multiple_of(32) {
        return Err(Failure::Usage(format!(
            "--resolution must be a positive multiple of 32, got {}",
            a.resolution
        )));
    }
    let mut pairs = vec![
        ("arch", a.arch.clone()),
        ("kernels", list(&arch.kernels)),
        ("resolution", a.resolution.to_string()),
        ("csv", opt_path(&a.csv)),
    ];
    pairs.push(("unit", "1 FLOP = 1 multiply-accumulate".into()));
    echo("flops", &pairs);

    let graph = LayerGraph::build(&arch).map_err(|e| Failure::Usage(e.to_string()))?;
    let (tp, tm) = graph.count(a.resolution, a.resolution)?;
    let (dp, dm) = arch.deploy_count(a.resolution, a.resolution)?;
    let csv = format!("form,params,macs\ntrain,{tp},{tm}\ndeploy,{dp},{dm}\n");
    println!("# deploy: {:.2}M params, {:.2}G MACs", dp as f64 / 1e6, dm as f64 / 1e9);
    match &a.csv {
        Some(path) => write_file(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run(a: RunArgs) -> Outcome {
    let arch = load_arch(&a.model.arch)?;
    if !arch.with_head {
        return Err(Failure::Usage(
            "run needs an architecture with a classification head".into(),
        ));
    }
    let mut pairs = model_pairs(&a.model, &arch);
    pairs.extend([
        ("input", a.input.display().to_string()),
        ("top", a.top.to_string()),
        ("backend", backend(a.backend).id().to_string()),
        ("threads", a.threads.threads.to_string()),
    ]);
    echo("run", &pairs);

    let pool = Pool::new(a.threads.threads as usize);
    pool.install(|| {
        let (graph, weights) = load_model(&a.model, &arch)?;
        let x = read_pnm(&a.input)?.to_tensor_channels(arch.in_channels)?;
        let logits = forward(&graph, &weights, &x, backend(a.backend))?;
        let scores = softmax(logits.data());
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
        println!("rank,class,score");
        for (rank, &c) in order.iter().take(a.top).enumerate() {
            println!("{},{c},{:.6}", rank + 1, scores[c]);
        }
        Ok(())
    })
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exp: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

fn densify(a: DensifyArgs) -> Outcome {
    let dilation = a.dilation as usize;
    if a.kernel == 0 || a.kernel.is_multiple_of(2) {
        return Err(Failure::Usage(format!("--kernel must be odd, got {}", a.kernel)));
    }
    if a.channels == 0 {
        return Err(Failure::Usage("--channels must be positive".into()));
    }
    echo(
        "densify",
        &[
            ("kernel", a.kernel.to_string()),
            ("dilation", dilation.to_string()),
            ("dense_kernel", ((a.kernel - 1) * dilation + 1).to_string()),
            ("weights", opt_path(&a.weights)),
            (
                "channels",
                if a.weights.is_some() {
                    "-".into()
                } else {
                    a.channels.to_string()
                },
            ),
            ("seed", a.seed.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );

    let source = match &a.weights {
        Some(path) => io::read_container(path)?.1,
        None => {
            let spec = ConvSpec::depthwise(a.channels, a.kernel, 1, dilation)?;
            let w = ConvWeights::random(&spec, &mut Rng::new(a.seed), Dist::DEFAULT_INIT)?;
            let mut mw = ModelWeights::default();
            mw.insert("kernel.weight", WeightBlock::from_tensor(&w.weight));
            mw
        }
    };

    let mut out = ModelWeights::default();
    let mut expanded = 0;
    let mut rng = Rng::new(a.seed).fork(1);
    for (name, block) in &source.blocks {
        let is_kernel = block.shape.len() == 4 && block.shape[2] == a.kernel && block.shape[3] == a.kernel;
        if !is_kernel {
            out.insert(name.clone(), block.clone());
            continue;
        }
        let sparse = ConvWeights::new(block.to_tensor()?, None)?;
        let dense = densify_dilated(&sparse, dilation)?;
        if block.shape[1] == 1 {
            let err = depthwise_gap(&sparse, &dense, dilation, &mut rng)?;
            println!(
                "{name}: {}x{} -> {}x{}, max_rel_err = {err:.3e}",
                a.kernel,
                a.kernel,
                dense.kernel(),
                dense.kernel()
            );
            if err > 1e-5 {
                return Err(Failure::Verify(format!("{name}: dense kernel deviates by {err:.3e}")));
            }
        } else {
            println!(
                "{name}: {}x{} -> {}x{}",
                a.kernel,
                a.kernel,
                dense.kernel(),
                dense.kernel()
            );
        }
        out.insert(name.clone(), WeightBlock::from_tensor(&dense.weight));
        expanded += 1;
    }
    if expanded == 0 {
        return Err(Failure::Usage(format!(
            "no {0}x{0} kernels found in the weights",
            a.kernel
        )));
    }
    io::write_container(None, &out, &a.out)?;
    Ok(())
}

/// Relative gap between the dilated and densified depth-wise convolutions on
/// one random input.
fn depthwise_gap(sparse: &ConvWeights, dense: &ConvWeights, dilation: usize, rng: &mut Rng) -> Result<f32, Error> {
    let c = sparse.weight.shape().n;
    let dilated = ConvSpec::depthwise(c, sparse.kernel(), 1, dilation)?;
    let plain = ConvSpec::depthwise(c, dense.kernel(), 1, 1)?;
    let side = dense.kernel() + 8;
    let x = Tensor::new_random(Shape::new(1, c, side, side)?, rng, Dist::Normal { mean: 0.0, std: 1.0 })?;
    let want = Backend::Direct.conv2d(&x, sparse, &dilated)?;
    let got = Backend::Direct.conv2d(&x, dense, &plain)?;
    Ok(got.zip_with(&want, |p, q| p - q)?.max_abs() / want.max_abs().max(f32::MIN_POSITIVE))
}
