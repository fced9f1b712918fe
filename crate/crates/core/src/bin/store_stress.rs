//! Crash-injection stress test for the shared store.
//!
//! Several worker processes publish overlapping components and best paths
//! into one store while the driver kills them at random and respawns them.
//! The driver keeps loading and validating the system image, then audits the
//! final store.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Child, Command as Proc, ExitCode};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::Serialize;
use serde_json::json;

use coevo::graph::{
    validate_path, AgentId, Component, ComponentKind, LayerBounds, ModelPath, MuTable, RootModel,
    SearchSpace, TaskId, TaskInfo,
};
use coevo::rng::Seed;
use coevo::store::{
    with_retry, FaultInjector, FaultPoint, Manifest, Store, StoreError, FORMAT_VERSION,
};

const WIDTH: u32 = 4;
const CLASSES: u32 = 3;
const POOL: u64 = 24;
const HEADS: u64 = 6;
const SHARED_TASK: &str = "shared";

#[derive(Parser)]
#[command(
    name = "coevo-store-stress",
    about = "Concurrent publish and crash-injection test for the store"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PointArg {
    Temp,
    Link,
}

#[derive(Subcommand)]
enum Command {
    /// Drive the full stress run and print a JSON summary.
    Run {
        /// Store directory; must not exist yet.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        workers: u32,
        /// Best-path publishes per worker.
        #[arg(long, default_value_t = 1000)]
        publishes: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Upper bound on injected crashes over the whole run.
        #[arg(long, default_value_t = 40)]
        max_kills: u32,
    },
    /// One publishing worker.
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        index: u32,
        #[arg(long)]
        publishes: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long, requires = "abort_point")]
        abort_after: Option<u64>,
        #[arg(long, value_enum)]
        abort_point: Option<PointArg>,
    },
}

fn worker_task(index: u32) -> TaskId {
    TaskId::new(format!("w{index}")).expect("valid task id")
}

fn root_components(seed: u64) -> Vec<Component> {
    let mut rng = Seed::new(seed).with_str("root").rng();
    let params = (0..WIDTH * WIDTH + WIDTH)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let embed = Component::new(ComponentKind::EmbeddingStub, WIDTH, WIDTH, params, None, 0)
        .expect("valid embed");
    vec![embed, Component::activation(WIDTH, 1)]
}

/// Pool member `k` of a family shared by every worker, so publishes overlap.
fn pooled(seed: u64, label: &str, k: u64, out_dim: u32, depth: u32) -> Component {
    let mut rng = Seed::new(seed).with_str(label).with(k).rng();
    let params = (0..WIDTH * out_dim + out_dim)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    Component::new(ComponentKind::Dense, WIDTH, out_dim, params, None, depth).expect("valid dense")
}

/// Deterministic content of publish `op` of `task`: extra blocks on top of
/// the root plus a head, all drawn from the shared pools.
fn build_op(seed: u64, root: &[Component], task: &TaskId, op: u64) -> (Vec<Component>, ModelPath) {
    let mut rng = Seed::new(seed).with_str(task.as_str()).with(op).rng();
    let mut comps: Vec<Component> = Vec::new();
    let mut ids: Vec<_> = root.iter().map(|c| c.id().clone()).collect();
    for b in 0..rng.random_range(0..=3u32) {
        let depth = 2 + 2 * b;
        let dense = pooled(seed, "dense", rng.random_range(0..POOL), WIDTH, depth);
        let act = Component::activation(WIDTH, depth + 1);
        ids.push(dense.id().clone());
        ids.push(act.id().clone());
        comps.push(dense);
        comps.push(act);
    }
    let head = pooled(
        seed,
        "head",
        rng.random_range(0..HEADS),
        CLASSES,
        ids.len() as u32,
    );
    let path = ModelPath {
        task_id: task.clone(),
        component_ids: ids,
        head_id: head.id().clone(),
        hyperparams: SearchSpace::default().midpoint(),
        mu: MuTable::default(),
        score: op as f64,
        val_accuracy: 0.0,
        test_accuracy: 0.0,
        generation_born: op,
        parent_fingerprint: None,
    };
    comps.push(head);
    (comps, path)
}

fn manifest(workers: u32, root: &[Component]) -> Manifest {
    let space = SearchSpace::default();
    let info = TaskInfo {
        input_dim: WIDTH,
        n_classes: CLASSES,
    };
    let mut tasks: BTreeMap<TaskId, TaskInfo> =
        (0..workers).map(|i| (worker_task(i), info)).collect();
    tasks.insert(TaskId::new(SHARED_TASK).expect("valid task id"), info);
    Manifest {
        format: FORMAT_VERSION,
        root: RootModel {
            component_ids: root.iter().map(|c| c.id().clone()).collect(),
            hyperparams: space.midpoint(),
        },
        tasks,
        agents: (0..workers)
            .map(|i| AgentId::new(format!("w{i}")).expect("valid agent id"))
            .collect(),
        layer_bounds: LayerBounds {
            min_layers: 2,
            max_layers: 8,
        },
        search_space: space,
    }
}

fn run_worker(
    dir: &Path,
    index: u32,
    publishes: u64,
    seed: u64,
    faults: FaultInjector,
) -> anyhow::Result<()> {
    let store = Store::open(dir)?.with_faults(faults);
    let root = root_components(seed);
    let own = worker_task(index);
    let shared = TaskId::new(SHARED_TASK).expect("valid task id");
    let mut op = store.current_best(&own)?.map_or(0, |(v, _)| v + 1);
    while op < publishes {
        let (comps, path) = build_op(seed, &root, &own, op);
        for c in &comps {
            with_retry(5, || store.publish_component(c))?;
        }
        let prev = store.current_best(&own)?.map(|(_, r)| r.path.fingerprint());
        with_retry(5, || store.publish_best(&path, op, prev.as_deref()))?;
        if op % 4 == index as u64 % 4 {
            let mut contested = path.clone();
            contested.task_id = shared.clone();
            let prev = store
                .current_best(&shared)?
                .map(|(_, r)| r.path.fingerprint());
            match store.publish_best(&contested, op, prev.as_deref()) {
                Ok(_) | Err(StoreError::Conflict { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        op += 1;
    }
    Ok(())
}

struct Running {
    child: Child,
    armed: bool,
    killed: bool,
}

#[derive(Debug, Default, Serialize)]
struct Summary {
    workers: u32,
    publishes_per_worker: u64,
    best_versions: usize,
    shared_versions: usize,
    components: usize,
    spawns: u32,
    injected_aborts: u32,
    external_kills: u32,
    image_loads: u64,
    paths_validated: u64,
    invalid_images: u64,
    torn_records: usize,
    integrity_violations: usize,
    leftover_temp_files: usize,
    wall_time_s: f64,
}

/// Load the current image and validate every best in it. Returns the number
/// of paths checked, or an error describing the first failure.
fn check_image(store: &Store) -> Result<u64, String> {
    let image = store.load_system_image().map_err(|e| e.to_string())?;
    for path in image.bests.values() {
        validate_path(path, &image, &image).map_err(|v| format!("{}: {v:?}", path.task_id))?;
    }
    Ok(image.bests.len() as u64)
}

fn spawn(
    exe: &Path,
    dir: &Path,
    index: u32,
    publishes: u64,
    seed: u64,
    fault: Option<(u64, PointArg)>,
) -> anyhow::Result<Child> {
    let mut cmd = Proc::new(exe);
    cmd.args(["worker", "--dir"]).arg(dir).args([
        "--index",
        &index.to_string(),
        "--publishes",
        &publishes.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    if let Some((after, point)) = fault {
        cmd.args(["--abort-after", &after.to_string(), "--abort-point"]);
        cmd.arg(match point {
            PointArg::Temp => "temp",
            PointArg::Link => "link",
        });
    }
    cmd.spawn().context("spawning worker")
}

fn drive(
    dir: &Path,
    workers: u32,
    publishes: u64,
    seed: u64,
    max_kills: u32,
) -> anyhow::Result<Summary> {
    if dir.exists() {
        bail!("{} already exists", dir.display());
    }
    let start = Instant::now();
    let root = root_components(seed);
    let store = Store::init(dir, manifest(workers, &root), &root)?;
    let exe = std::env::current_exe().context("locating own executable")?;
    let mut rng = Seed::new(seed).with_str("driver").rng();
    let mut summary = Summary {
        workers,
        publishes_per_worker: publishes,
        ..Summary::default()
    };
    let mut kills_left = max_kills;
    let plan_fault = |rng: &mut rand_chacha::ChaCha8Rng, kills_left: &mut u32| {
        if *kills_left > 0 && rng.random_bool(0.5) {
            *kills_left -= 1;
            let point = if rng.random_bool(0.5) {
                PointArg::Temp
            } else {
                PointArg::Link
            };
            Some((rng.random_range(20..400u64), point))
        } else {
            None
        }
    };

    let mut children: Vec<Option<Running>> = Vec::new();
    for i in 0..workers {
        let fault = plan_fault(&mut rng, &mut kills_left);
        let child = spawn(&exe, dir, i, publishes, seed, fault)?;
        children.push(Some(Running {
            child,
            armed: fault.is_some(),
            killed: false,
        }));
        summary.spawns += 1;
    }
    let mut first_failure: Option<String> = None;
    while children.iter().any(Option::is_some) {
        std::thread::sleep(Duration::from_millis(5));
        match check_image(&store) {
            Ok(n) => summary.paths_validated += n,
            Err(e) => {
                summary.invalid_images += 1;
                first_failure.get_or_insert(e);
            }
        }
        summary.image_loads += 1;
        if kills_left > 0 && rng.random_bool(0.02) {
            let i = rng.random_range(0..workers as usize);
            if let Some(r) = children[i].as_mut() {
                if !r.killed && r.child.kill().is_ok() {
                    r.killed = true;
                    kills_left -= 1;
                    summary.external_kills += 1;
                }
            }
        }
        for (i, slot) in children.iter_mut().enumerate() {
            let Some(r) = slot.as_mut() else {
                continue;
            };
            let Some(status) = r.child.try_wait()? else {
                continue;
            };
            if status.success() {
                *slot = None;
                continue;
            }
            if status.code().is_some() || !(r.armed || r.killed) {
                bail!("worker {i} failed with {status}");
            }
            summary.injected_aborts += (!r.killed) as u32;
            let fault = plan_fault(&mut rng, &mut kills_left);
            let child = spawn(&exe, dir, i as u32, publishes, seed, fault)?;
            *slot = Some(Running {
                child,
                armed: fault.is_some(),
                killed: false,
            });
            summary.spawns += 1;
        }
    }

    for t in store.manifest().tasks.keys() {
        match store.best_history(t) {
            Ok(h) => {
                let versions: Vec<u64> = h.iter().map(|(v, _)| *v).collect();
                if versions.iter().enumerate().any(|(i, v)| *v != i as u64) {
                    first_failure.get_or_insert(format!("non-contiguous versions for {t}"));
                }
                if t.as_str() == SHARED_TASK {
                    summary.shared_versions = h.len();
                } else if h.len() as u64 != publishes {
                    first_failure.get_or_insert(format!(
                        "{t} holds {} versions, expected {publishes}",
                        h.len()
                    ));
                }
                summary.best_versions += h.len();
            }
            Err(StoreError::MalformedRecord { .. }) => summary.torn_records += 1,
            Err(e) => return Err(e.into()),
        }
    }
    match store.audit() {
        Ok(report) => {
            summary.components = report.components;
            summary.leftover_temp_files = report.temp_files;
        }
        Err(StoreError::IntegrityViolation { .. } | StoreError::InvalidPath { .. }) => {
            summary.integrity_violations += 1
        }
        Err(StoreError::MalformedRecord { .. }) => summary.torn_records += 1,
        Err(e) => return Err(e.into()),
    }
    summary.wall_time_s = start.elapsed().as_secs_f64();
    if let Some(f) = first_failure {
        bail!("{f}; summary {}", serde_json::to_string(&summary)?);
    }
    Ok(summary)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            dir,
            workers,
            publishes,
            seed,
            max_kills,
        } => {
            let summary = drive(&dir, workers, publishes, seed, max_kills)?;
            println!("{}", serde_json::to_string(&summary)?);
            if summary.torn_records + summary.integrity_violations + summary.invalid_images as usize
                > 0
            {
                bail!("store safety violated");
            }
        }
        Command::Worker {
            dir,
            index,
            publishes,
            seed,
            abort_after,
            abort_point,
        } => {
            let faults = match (abort_after, abort_point) {
                (Some(n), Some(PointArg::Temp)) => {
                    FaultInjector::abort_at(FaultPoint::AfterTempWrite, n)
                }
                (Some(n), Some(PointArg::Link)) => {
                    FaultInjector::abort_at(FaultPoint::AfterLink, n)
                }
                _ => FaultInjector::none(),
            };
            run_worker(&dir, index, publishes, seed, faults)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": "StoreStress", "message": format!("{e:#}")})
            );
            ExitCode::FAILURE
        }
    }
}
