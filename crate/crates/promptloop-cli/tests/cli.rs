use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_promptloop")
}

const TINY: &str = "\
run.id = smoke
world.kind = spurbirds
world.train = 24
world.val = 8
world.test = 16
world.correlation = 0.9
gen.pool = 32
gen.iters = 40
gen.hidden = 24
gen.sample_steps = 3
embed.pool = 24
embed.iters = 30
model.epochs = 2
pipeline.budget = 8
pipeline.prompts = 1
pipeline.pool = 4
pipeline.seeds = 1
pipeline.train_epochs = 1
pipeline.fractions = 1,0.5
pipeline.methods = no_extra,agnostic
optim.steps = 2
optim.batch = 2
optim.tokens = 2
optim.sample_steps = 2
optim.guided_steps = 3
optim.guided_warmup = 1
train.data = gen/adversarial-s1
transfer.other_arch = mlp_wide
";

struct Runner {
    cfg: PathBuf,
    root: PathBuf,
}

impl Runner {
    fn new(dir: &Path, cfg_text: &str) -> Runner {
        let cfg = dir.join("tiny.cfg");
        std::fs::write(&cfg, cfg_text).unwrap();
        Runner { cfg, root: dir.join("out") }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(bin())
            .arg("--config")
            .arg(&self.cfg)
            .arg("--root")
            .arg(&self.root)
            .args(args)
            .output()
            .expect("spawn promptloop")
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "`{}` failed:\nstdout: {}\nstderr: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    }

    fn fail(&self, args: &[&str], code: i32) -> String {
        let out = self.run(args);
        assert_eq!(
            out.status.code(),
            Some(code),
            "`{}` exit: {:?}\nstderr: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stderr).into_owned()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join("smoke").join(rel)
    }
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn end_to_end_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let r = Runner::new(tmp.path(), TINY);

    r.ok(&["build-world"]);
    r.ok(&["pretrain"]);
    r.ok(&["optimize"]);
    r.ok(&["generate"]);
    r.ok(&["train"]);
    let sweep_out = r.ok(&["sweep"]);
    assert!(sweep_out.contains("no_extra"), "sweep output: {sweep_out}");
    r.ok(&["transfer"]);
    let verify_out = r.ok(&["verify"]);
    assert!(verify_out.contains("all hashes match"), "verify output: {verify_out}");

    for rel in [
        "manifest.json",
        "world/spurbirds/train/index.tsv",
        "models/denoiser.ck",
        "models/embedder.ck",
        "models/task-mlp_small.ck",
        "models/task-mlp_wide.ck",
        "bank/adversarial-s1/bank.tsv",
        "gen/adversarial-s1/index.tsv",
        "tuned/task-mlp_small-gen-adversarial-s1-s1.ck",
        "sweep/curve.csv",
        "sweep/manifest.json",
        "transfer/transfer.csv",
        "transfer/manifest.json",
    ] {
        assert!(r.path(rel).exists(), "missing {rel}");
    }
    // optimized prompts come with their optimization traces
    let bank = std::fs::read_dir(r.path("bank/adversarial-s1")).unwrap();
    let traces: Vec<_> = bank
        .filter_map(|e| {
            let name = e.unwrap().file_name().to_string_lossy().into_owned();
            name.ends_with("-trace.tsv").then_some(name)
        })
        .collect();
    assert!(!traces.is_empty(), "no trace files in bank dir");
    let trace_text = std::fs::read_to_string(r.path(&format!("bank/adversarial-s1/{}", traces[0]))).unwrap();
    assert!(trace_text.starts_with("step\tobjective\tadversarial\t"), "trace header: {trace_text}");

    // render both raster targets and check the magic numbers
    let index = std::fs::read_to_string(r.path("world/spurbirds/train/index.tsv")).unwrap();
    let id = index.lines().nth(1).unwrap().split('\t').next().unwrap().to_string();
    let data = r.path("world/spurbirds/train");
    let img = tmp.path().join("render/ex.ppm");
    let mask = tmp.path().join("render/ex.pgm");
    r.ok(&["render", "--data", data.to_str().unwrap(), "--id", &id, "--out", img.to_str().unwrap()]);
    r.ok(&[
        "render",
        "--data",
        data.to_str().unwrap(),
        "--id",
        &id,
        "--target",
        "mask",
        "--out",
        mask.to_str().unwrap(),
    ]);
    assert!(std::fs::read(&img).unwrap().starts_with(b"P6\n16 16\n255\n"));
    assert!(std::fs::read(&mask).unwrap().starts_with(b"P5\n16 16\n255\n"));
    let err = r.fail(
        &["render", "--data", data.to_str().unwrap(), "--id", &id, "--target", "depth", "--out", img.to_str().unwrap()],
        1,
    );
    assert!(err.contains("class label"), "depth error: {err}");

    // repeating a recorded stage is refused
    let err = r.fail(&["build-world"], 1);
    assert!(err.contains("already recorded"), "duplicate stage error: {err}");

    // a second run with the same config but fresh id regenerates bit-identical data
    let second_root = r.path("..").join("..").join("out2");
    let world_b = second_root.join("det");
    std::fs::create_dir_all(&world_b).unwrap();
    for dir in ["world", "models"] {
        copy_tree(&r.path(dir), &world_b.join(dir));
    }
    let rb = Runner {
        cfg: r.cfg.clone(),
        root: second_root.clone(),
    };
    rb.ok(&["--set", "run.id=det", "optimize"]);
    rb.ok(&["--set", "run.id=det", "generate"]);
    let a = read_tree(&r.path("gen/adversarial-s1"));
    let b = read_tree(&second_root.join("det/gen/adversarial-s1"));
    assert_eq!(a, b, "generated datasets differ between identical configs");

    // tampering with a recorded artifact is caught and named
    let gen_index = r.path("gen/adversarial-s1/index.tsv");
    let mut bytes = std::fs::read(&gen_index).unwrap();
    bytes.push(b'x');
    std::fs::write(&gen_index, bytes).unwrap();
    let err = r.fail(&["verify"], 1);
    assert!(err.contains("gen/adversarial-s1"), "verify error: {err}");

    // missing prerequisite exits 2 and names the producing command
    let err = r.fail(&["--set", "run.id=fresh", "optimize"], 2);
    assert!(err.contains("missing dependency"), "missing dep error: {err}");
    assert!(err.contains("build-world"), "missing dep hint: {err}");

    // unparsable config value exits 1
    r.fail(&["--set", "run.id=fresh2", "--set", "world.train=banana", "build-world"], 1);
}

fn copy_tree(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let p = entry.unwrap().path();
        let dest = to.join(p.file_name().unwrap());
        if p.is_dir() {
            copy_tree(&p, &dest);
        } else {
            std::fs::copy(&p, &dest).unwrap();
        }
    }
}

#[test]
fn depth_render_and_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "\
run.id = depth
world.kind = depthrooms
world.train = 8
world.val = 4
world.test = 4
";
    let r = Runner::new(tmp.path(), cfg);
    r.ok(&["build-world"]);
    let data = r.root.join("depth/world/depthrooms/train");
    let index = std::fs::read_to_string(data.join("index.tsv")).unwrap();
    let id = index.lines().nth(1).unwrap().split('\t').next().unwrap().to_string();
    let out = tmp.path().join("d.pgm");
    r.ok(&[
        "render",
        "--data",
        data.to_str().unwrap(),
        "--id",
        &id,
        "--target",
        "depth",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(std::fs::read(&out).unwrap().starts_with(b"P5\n16 16\n255\n"));

    let err = r.fail(
        &["render", "--data", data.to_str().unwrap(), "--id", &id, "--target", "sprite", "--out", out.to_str().unwrap()],
        1,
    );
    assert!(err.contains("unknown target"), "target error: {err}");
    let err = r.fail(
        &["render", "--data", data.to_str().unwrap(), "--id", "nope", "--out", out.to_str().unwrap()],
        1,
    );
    assert!(err.contains("no example"), "id error: {err}");

    // --help exits 0, unknown subcommands exit 1
    let help = Command::new(bin()).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    let bad = Command::new(bin()).arg("frobnicate").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
