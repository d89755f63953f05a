use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use layout_lidar::layout::{parse_layout, CAR};
use layout_lidar::scorenet::{load_checkpoint, ParamGroup};
use layout_lidar::sensor::{RangeImage, DEPTH_CHANNEL, SEMANTIC_CHANNEL};
use tempfile::TempDir;

const SMALL_SENSOR: &str = "sensor.rows = 8\nsensor.cols = 64\n";

const TINY_MODEL: &str = "sensor.rows = 4\nsensor.cols = 16\n\
model.widths = 8,8\nmodel.blocks_per_level = 1\nmodel.emb_dim = 8\nmodel.freq_count = 2\n\
schedule.levels = 3\ntrain.steps = 6\ntrain.batch_size = 2\ntrain.phase_a_steps = 2\n\
train.log_every = 2\nsampler.steps_per_level = 2\n";

const TWO_CARS: &str = "palette ground 0 0 0\npalette road 1 1 1\npalette building 2 2 2\n\
palette car 3 3 3\npalette vegetation 4 4 4\n\
prim ground plane 0 0 0 200 200 0 0\n\
prim car cuboid 7 -1.8 0.75 4.5 1.8 1.5 0\n\
prim car cuboid -8 1.8 0.75 4.5 1.8 1.5 0\n";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layout-lidar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn image(path: &Path) -> RangeImage {
    RangeImage::read_lri(fs::File::open(path).unwrap()).unwrap()
}

fn sorted_entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn gen_scenes_is_deterministic_and_parses() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("none");
    ok(&[
        "gen-scenes",
        "--num",
        "0",
        "--seed",
        "1",
        "--out",
        s(&empty),
    ]);
    assert!(sorted_entries(&empty).is_empty());

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["gen-scenes", "--num", "100", "--seed", "7", "--out", s(&a)]);
    ok(&["gen-scenes", "--num", "100", "--seed", "7", "--out", s(&b)]);
    let names = sorted_entries(&a);
    assert_eq!(names.len(), 100);
    for n in &names {
        let ta = fs::read_to_string(a.join(n)).unwrap();
        assert_eq!(ta, fs::read_to_string(b.join(n)).unwrap());
        let layout = parse_layout(&ta).unwrap();
        assert!(layout.count_label(CAR) >= 1);
    }
}

#[test]
fn gen_scenes_honors_car_band() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "c.cfg",
        "scene.car_x_min = -12\nscene.car_x_max = 12\n",
    );
    let out = tmp.path().join("s");
    ok(&[
        "gen-scenes",
        "--num",
        "20",
        "--out",
        s(&out),
        "--config",
        s(&cfg),
    ]);
    for n in sorted_entries(&out) {
        let l = parse_layout(&fs::read_to_string(out.join(n)).unwrap()).unwrap();
        for p in l.primitives.iter().filter(|p| p.label == CAR) {
            assert!(p.center.x.abs() <= 12.0);
        }
    }
}

#[test]
fn render_empty_layout_is_blank() {
    let tmp = TempDir::new().unwrap();
    let layout = write(tmp.path(), "e.layout", "palette car 0 0 0\n");
    let cfg = write(tmp.path(), "s.cfg", SMALL_SENSOR);
    let out = tmp.path().join("e.lri");
    ok(&[
        "render",
        "--layout",
        s(&layout),
        "--sensor",
        s(&cfg),
        "--out",
        s(&out),
    ]);
    let img = image(&out);
    assert_eq!((img.spec.rows, img.spec.cols), (8, 64));
    assert!(img.data.iter().all(|&v| v == 0.0));
}

#[test]
fn render_trajectory_raydrop_and_clouds() {
    let tmp = TempDir::new().unwrap();
    let layout = write(tmp.path(), "s.layout", TWO_CARS);
    let cfg = write(tmp.path(), "s.cfg", SMALL_SENSOR);
    let traj = write(
        tmp.path(),
        "t.txt",
        "0 0 0 0\n# comment\n1,0,0,5\n\n2 0 0 10\n",
    );
    let frames = tmp.path().join("frames");
    let args = |out: &Path| {
        vec![
            "render".to_string(),
            "--layout".into(),
            s(&layout).into(),
            "--sensor".into(),
            s(&cfg).into(),
            "--trajectory".into(),
            s(&traj).into(),
            "--out".into(),
            s(out).into(),
            "--raydrop".into(),
            "--cloud".into(),
        ]
    };
    let a: Vec<String> = args(&frames);
    ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let names = sorted_entries(&frames);
    assert_eq!(
        names,
        [
            "frame_0000.cloud.txt",
            "frame_0000.lri",
            "frame_0001.cloud.txt",
            "frame_0001.lri",
            "frame_0002.cloud.txt",
            "frame_0002.lri"
        ]
    );
    let again = tmp.path().join("again");
    let b: Vec<String> = args(&again);
    ok(&b.iter().map(String::as_str).collect::<Vec<_>>());
    for n in &names {
        assert_eq!(
            fs::read(frames.join(n)).unwrap(),
            fs::read(again.join(n)).unwrap()
        );
    }

    let clean = tmp.path().join("clean.lri");
    ok(&[
        "render",
        "--layout",
        s(&layout),
        "--sensor",
        s(&cfg),
        "--out",
        s(&clean),
    ]);
    let clean = image(&clean);
    let dropped = image(&frames.join("frame_0000.lri"));
    assert!(dropped.returned_pixels() < clean.returned_pixels());
    assert_eq!(
        clean.channel(SEMANTIC_CHANNEL),
        dropped.channel(SEMANTIC_CHANNEL)
    );
}

#[test]
fn surface_sampling_sees_through_occluders() {
    let tmp = TempDir::new().unwrap();
    let hidden = "palette building 0 0 0\npalette car 1 1 1\n\
prim building cuboid 12 0 5 4 30 10 0\nprim car cuboid 20 0 0.75 4.5 1.8 1.5 0\n";
    let layout = write(tmp.path(), "h.layout", hidden);
    let cfg = write(tmp.path(), "s.cfg", SMALL_SENSOR);
    let ray = tmp.path().join("ray.lri");
    let surf = tmp.path().join("surf.lri");
    ok(&[
        "render",
        "--layout",
        s(&layout),
        "--sensor",
        s(&cfg),
        "--out",
        s(&ray),
        "--cloud",
    ]);
    ok(&[
        "render",
        "--layout",
        s(&layout),
        "--sensor",
        s(&cfg),
        "--out",
        s(&surf),
        "--cloud",
        "--surface-sample",
        "20",
    ]);
    let count_car = |p: &Path| {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#') && l.ends_with(" 1"))
            .count()
    };
    assert_eq!(count_car(&tmp.path().join("ray.cloud.txt")), 0);
    assert!(count_car(&tmp.path().join("surf.cloud.txt")) > 0);
}

#[test]
fn extract_recovers_cars() {
    let tmp = TempDir::new().unwrap();
    let layout = write(tmp.path(), "s.layout", TWO_CARS);
    let out = tmp.path().join("r.lri");
    ok(&[
        "render",
        "--layout",
        s(&layout),
        "--out",
        s(&out),
        "--cloud",
    ]);
    let recovered = tmp.path().join("rec.layout");
    ok(&[
        "extract",
        "--cloud",
        s(&tmp.path().join("r.cloud.txt")),
        "--out",
        s(&recovered),
    ]);
    let l = parse_layout(&fs::read_to_string(recovered).unwrap()).unwrap();
    assert_eq!(l.count_label(CAR), 2);
}

fn pgm16(w: usize, h: usize, values: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

#[test]
fn unproject_camera_maps() {
    let tmp = TempDir::new().unwrap();
    let depth = tmp.path().join("d.pgm");
    let sem = tmp.path().join("s.pgm");
    fs::write(&depth, pgm16(3, 2, &[0, 2000, 0, 0, 0, 5000])).unwrap();
    let mut sem_bytes = b"P5\n3 2\n255\n".to_vec();
    sem_bytes.extend_from_slice(&[0, 3, 0, 0, 0, 4]);
    fs::write(&sem, sem_bytes).unwrap();
    let out = tmp.path().join("c.txt");
    ok(&[
        "unproject",
        "--depth",
        s(&depth),
        "--semantic",
        s(&sem),
        "--intrinsics",
        "2,2,1,0.5",
        "--out",
        s(&out),
    ]);
    let cloud =
        layout_lidar::cloud::LabeledPointCloud::read_text(fs::read(&out).unwrap().as_slice())
            .unwrap();
    assert_eq!(cloud.labels, vec![3, 4]);
    let p = cloud.points[0];
    assert!((p.x - 2.0).abs() < 1e-6 && p.y.abs() < 1e-6 && (p.z - 0.5).abs() < 1e-6);
    let q = cloud.points[1];
    assert!((q.x - 5.0).abs() < 1e-6 && (q.y + 2.5).abs() < 1e-6 && (q.z + 1.25).abs() < 1e-6);

    let wrong = tmp.path().join("w.pgm");
    fs::write(&wrong, pgm16(2, 2, &[0; 4])).unwrap();
    let r = run(&[
        "unproject",
        "--depth",
        s(&wrong),
        "--semantic",
        s(&sem),
        "--intrinsics",
        "2,2,1,0.5",
        "--out",
        s(&out),
    ]);
    assert!(!r.status.success());
}

/// Renders scenes into `dir` as target/condition pairs.
fn desk_corpus(tmp: &Path, cfg: &Path, n: usize) -> PathBuf {
    let scenes = tmp.join("scenes");
    let data = tmp.join("data");
    fs::create_dir_all(&data).unwrap();
    ok(&[
        "gen-scenes",
        "--num",
        &n.to_string(),
        "--seed",
        "3",
        "--out",
        s(&scenes),
    ]);
    for (i, name) in sorted_entries(&scenes).iter().enumerate() {
        let layout = scenes.join(name);
        let target = data.join(format!("f{i}.lri"));
        let cond = data.join(format!("f{i}.cond.lri"));
        ok(&[
            "render",
            "--layout",
            s(&layout),
            "--sensor",
            s(cfg),
            "--out",
            s(&target),
            "--raydrop",
        ]);
        ok(&[
            "render",
            "--layout",
            s(&layout),
            "--sensor",
            s(cfg),
            "--out",
            s(&cond),
        ]);
    }
    data
}

#[test]
fn train_sample_eval_pipeline() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "m.cfg", TINY_MODEL);
    let data = desk_corpus(tmp.path(), &cfg, 4);

    let base = tmp.path().join("base.ck");
    let log = ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&base),
    ]);
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3, "{log}");
    assert!(lines[2].starts_with("step 6 loss "));
    let base2 = tmp.path().join("base2.ck");
    assert_eq!(
        log,
        ok(&[
            "train",
            "--data",
            s(&data),
            "--config",
            s(&cfg),
            "--out",
            s(&base2)
        ])
    );
    assert_eq!(fs::read(&base).unwrap(), fs::read(&base2).unwrap());

    let ctrl = tmp.path().join("ctrl.ck");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&ctrl),
        "--controlnet",
        "--base",
        s(&base),
        "--phase",
        "ab",
    ]);
    let b = load_checkpoint(&base).unwrap().state.model;
    let c = load_checkpoint(&ctrl).unwrap().state.model;
    assert!(c.has_adapter());
    assert_eq!(
        b.params.checksum(ParamGroup::Base),
        c.params.checksum(ParamGroup::Base)
    );
    let fusion: f32 = c
        .fusion_param_ids()
        .iter()
        .flat_map(|&i| c.params.tensors[i].data.iter())
        .map(|v| v.abs())
        .sum();
    assert!(fusion > 0.0, "fusion layers left at zero");

    let scene = tmp.path().join("scenes").join("scene_0000.layout");
    let samples = tmp.path().join("samples");
    let sample_args = |out: &Path| {
        vec![
            "sample".to_string(),
            "--ckpt".into(),
            s(&ctrl).into(),
            "--layout".into(),
            s(&scene).into(),
            "--pose".into(),
            "0,0,0,0".into(),
            "--num".into(),
            "3".into(),
            "--seed".into(),
            "9".into(),
            "--out".into(),
            s(out).into(),
            "--config".into(),
            s(&cfg).into(),
        ]
    };
    let a = sample_args(&samples);
    ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let again = tmp.path().join("samples2");
    let a2 = sample_args(&again);
    ok(&a2.iter().map(String::as_str).collect::<Vec<_>>());
    let names = sorted_entries(&samples);
    assert_eq!(names.len(), 6);
    for n in &names {
        assert_eq!(
            fs::read(samples.join(n)).unwrap(),
            fs::read(again.join(n)).unwrap()
        );
    }
    let img = image(&samples.join("sample_0000.lri"));
    assert_eq!((img.spec.rows, img.spec.cols), (4, 16));
    assert!(img
        .channel(DEPTH_CHANNEL)
        .iter()
        .all(|&d| d == 0.0 || (1.0..=80.0).contains(&d)));

    let report = ok(&[
        "eval",
        "--gen",
        s(&data),
        "--ref",
        s(&data),
        "--metrics",
        "jsd,mmd,frechet",
    ]);
    let values: Vec<(String, f64)> = report
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(values[0], ("jsd".into(), 0.0));
    assert_eq!(values[1], ("mmd".into(), 0.0));
    assert!(values[2].0 == "frechet" && values[2].1 < 1e-6);

    let csv = tmp.path().join("r.csv");
    let report = ok(&[
        "eval",
        "--gen",
        s(&samples),
        "--ref",
        s(&data),
        "--metrics",
        "jsd",
        "--layout",
        s(&scene),
        "--csv",
        s(&csv),
    ]);
    let keys: Vec<&str> = report
        .lines()
        .map(|l| l.split('=').next().unwrap())
        .collect();
    assert_eq!(keys, ["jsd", "box_recall", "bev_iou"]);
    assert!(fs::read_to_string(csv)
        .unwrap()
        .starts_with("metric,value\njsd,"));
}

#[test]
fn conditional_training_needs_conditions_and_base() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "m.cfg", TINY_MODEL);
    let data = tmp.path().join("data");
    fs::create_dir_all(&data).unwrap();
    let layout = write(tmp.path(), "s.layout", TWO_CARS);
    ok(&[
        "render",
        "--layout",
        s(&layout),
        "--sensor",
        s(&cfg),
        "--out",
        s(&data.join("a.lri")),
    ]);
    let base = tmp.path().join("base.ck");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&base),
    ]);
    let r = run(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("c.ck")),
        "--controlnet",
        "--base",
        s(&base),
    ]);
    assert!(!r.status.success());
    let r = run(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&base),
        "--controlnet",
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(String::from_utf8(r.stderr).unwrap().lines().count(), 1);
    let r = run(&[
        "sample",
        "--ckpt",
        s(&base),
        "--layout",
        s(&layout),
        "--out",
        s(&tmp.path().join("x")),
    ]);
    let err = String::from_utf8(r.stderr).unwrap();
    assert!(!r.status.success());
    assert!(err.contains("adapter"), "{err}");
}

#[test]
fn errors_are_single_line() {
    let tmp = TempDir::new().unwrap();
    let bad = write(tmp.path(), "bad.cfg", "sensor.rows = 8\nbogus.key = 1\n");
    let layout = write(tmp.path(), "s.layout", TWO_CARS);
    for args in [
        vec![
            "render",
            "--layout",
            s(&layout),
            "--sensor",
            s(&bad),
            "--out",
            "x.lri",
        ],
        vec!["render", "--layout", "/nonexistent/l", "--out", "x.lri"],
        vec!["eval", "--gen", s(tmp.path()), "--ref", s(tmp.path())],
        vec![
            "render",
            "--layout",
            s(&layout),
            "--pose",
            "1,2",
            "--out",
            "x.lri",
        ],
    ] {
        let r = run(&args);
        assert_eq!(r.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8(r.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "), "{err}");
    }
    let msg = String::from_utf8(
        run(&[
            "render",
            "--layout",
            s(&layout),
            "--sensor",
            s(&bad),
            "--out",
            "x.lri",
        ])
        .stderr,
    )
    .unwrap();
    assert!(msg.contains("line 2"), "{msg}");
}
