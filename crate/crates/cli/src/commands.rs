use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use layout_lidar::cloud::LabeledPointCloud;
use layout_lidar::config::Config;
use layout_lidar::extraction::{extract_layout, unproject_depth_semantic, CameraIntrinsics};
use layout_lidar::geom::Point3;
use layout_lidar::layout::{generate_random_scene, Pose};
use layout_lidar::metrics::{
    bev_histogram, frechet, jsd, layout_consistency_against, log_depth_features, mmd, BevGrid,
    FeatureSet,
};
use layout_lidar::raycast::{apply_raydrop, surface_sample, RaycastScene};
use layout_lidar::scorenet::{
    encode_condition, encode_depth, load_checkpoint, sample_range_image, save_checkpoint,
    train as run_training, Checkpoint, ModelScore, Phase, ScoreError, ScoreModel, TrainConfig,
    TrainExample, TrainState,
};
use layout_lidar::sensor::{point_cloud_to_range_image, range_image_to_point_cloud, SensorSpec};

use crate::files::{
    ensure_dir, list_images, read_cloud, read_config, read_gray, read_image, read_layout, sibling,
    write_cloud, write_image, write_layout, CLOUD_SUFFIX, COND_SUFFIX,
};
use crate::{
    EvalArgs, ExtractArgs, GenScenesArgs, PhaseArg, RenderArgs, SampleArgs, TrainArgs,
    UnprojectArgs,
};

fn parse_pose(s: Option<&str>) -> Result<Pose> {
    match s {
        Some(s) => Pose::parse(s).map_err(|e| anyhow!("pose: {e}")),
        None => Ok(Pose::identity()),
    }
}

fn read_trajectory(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let pose =
            Pose::parse(body).map_err(|e| anyhow!("{} line {}: {e}", path.display(), i + 1))?;
        poses.push(pose);
    }
    if poses.is_empty() {
        bail!("trajectory {} has no poses", path.display());
    }
    Ok(poses)
}

pub fn gen_scenes(a: &GenScenesArgs) -> Result<()> {
    let cfg = read_config(a.config.as_deref())?;
    ensure_dir(&a.out)?;
    for i in 0..a.num {
        let layout = generate_random_scene(a.seed + i as u64, &cfg.scene)?;
        write_layout(&a.out.join(format!("scene_{i:04}.layout")), &layout)?;
    }
    Ok(())
}

/// World points seen from `pose`, in the sensor frame and within range.
fn to_sensor_frame(cloud: &LabeledPointCloud, spec: &SensorSpec, pose: &Pose) -> LabeledPointCloud {
    let lift = Point3::new(0.0, 0.0, spec.origin_height);
    let mut out = LabeledPointCloud::new();
    for (p, &l) in cloud.points.iter().zip(&cloud.labels) {
        let q = pose.to_local(*p) - lift;
        if q.norm() <= spec.max_range {
            out.push(q, l);
        }
    }
    out
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let cfg = read_config(a.sensor.as_deref())?;
    let spec = cfg.sensor;
    let layout = read_layout(&a.layout)?;
    let poses = match &a.trajectory {
        Some(t) => read_trajectory(t)?,
        None => vec![parse_pose(a.pose.as_deref())?],
    };
    let scene = RaycastScene::new(&layout)?;
    let targets: Vec<_> = if a.trajectory.is_some() {
        ensure_dir(&a.out)?;
        (0..poses.len())
            .map(|k| a.out.join(format!("frame_{k:04}.lri")))
            .collect()
    } else {
        vec![a.out.clone()]
    };
    for (k, (pose, path)) in poses.iter().zip(&targets).enumerate() {
        let seed = cfg.raydrop_seed.wrapping_add(k as u64);
        let (image, cloud) = match a.surface_sample {
            Some(density) => {
                if !(density > 0.0 && density.is_finite()) {
                    bail!("surface sample density must be positive, got {density}");
                }
                let cloud =
                    to_sensor_frame(&surface_sample(&scene.mesh, density, seed), &spec, pose);
                let mut image = point_cloud_to_range_image(&cloud, &spec);
                if a.raydrop {
                    image = apply_raydrop(&image, &cfg.raydrop, None, seed);
                }
                (image, cloud)
            }
            None => {
                let out = scene.render(&spec, pose);
                let image = if a.raydrop {
                    apply_raydrop(&out.image, &cfg.raydrop, Some(&out.incidence_cos), seed)
                } else {
                    out.image
                };
                let cloud = range_image_to_point_cloud(&image);
                (image, cloud)
            }
        };
        write_image(path, &image)?;
        if a.cloud {
            write_cloud(&sibling(path, CLOUD_SUFFIX), &cloud)?;
        }
    }
    Ok(())
}

pub fn extract(a: &ExtractArgs) -> Result<()> {
    let cfg = read_config(a.config.as_deref())?;
    let cloud = read_cloud(&a.cloud)?;
    write_layout(&a.out, &extract_layout(&cloud, &cfg.extraction))
}

pub fn unproject(a: &UnprojectArgs) -> Result<()> {
    let k: Vec<f64> = a
        .intrinsics
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| anyhow!("intrinsics must be `fx,fy,cx,cy`, got {:?}", a.intrinsics))?;
    if k.len() != 4 {
        bail!("intrinsics must be `fx,fy,cx,cy`, got {:?}", a.intrinsics);
    }
    if a.depth_scale.is_nan() || a.depth_scale <= 0.0 {
        bail!("depth scale must be positive");
    }
    let (w, h, depth) = read_gray(&a.depth)?;
    let (sw, sh, sem) = read_gray(&a.semantic)?;
    if (w, h) != (sw, sh) {
        bail!("depth is {w}x{h} but semantic map is {sw}x{sh}");
    }
    let intr = CameraIntrinsics::new(k[0], k[1], k[2], k[3], w, h)?;
    let depth: Vec<f32> = depth
        .iter()
        .map(|&d| (d as f64 / a.depth_scale) as f32)
        .collect();
    let sem: Vec<u32> = sem.into_iter().map(u32::from).collect();
    write_cloud(&a.out, &unproject_depth_semantic(&depth, &sem, &intr)?)
}

fn load_training_data(
    dir: &Path,
    conditional: bool,
    num_labels: usize,
) -> Result<(SensorSpec, Vec<TrainExample>)> {
    let paths = list_images(dir)?;
    let mut spec: Option<SensorSpec> = None;
    let mut data = Vec::with_capacity(paths.len());
    for path in &paths {
        let img = read_image(path)?;
        let s = *spec.get_or_insert(img.spec);
        if (img.spec.rows, img.spec.cols) != (s.rows, s.cols) {
            bail!(
                "{} is {}x{} but earlier images are {}x{}",
                path.display(),
                img.spec.rows,
                img.spec.cols,
                s.rows,
                s.cols
            );
        }
        let cond = if conditional {
            let cpath = sibling(path, COND_SUFFIX);
            let c = read_image(&cpath)?;
            if (c.spec.rows, c.spec.cols) != (s.rows, s.cols) {
                bail!("{} does not match its target size", cpath.display());
            }
            Some(encode_condition(&c, num_labels))
        } else {
            None
        };
        data.push(TrainExample {
            x: encode_depth(&img),
            cond,
        });
    }
    Ok((spec.expect("at least one image"), data))
}

fn train_phases(cfg: &Config, phase: Option<PhaseArg>) -> Vec<(Phase, u64)> {
    let steps = cfg.train.steps;
    match phase {
        None => vec![(Phase::Unconditional, steps)],
        Some(PhaseArg::A) => vec![(Phase::FusionOnly, steps)],
        Some(PhaseArg::B) => vec![(Phase::AdapterAndFusion, steps)],
        Some(PhaseArg::Ab) => {
            let a = cfg.train.phase_a_steps.min(steps);
            vec![(Phase::FusionOnly, a), (Phase::AdapterAndFusion, steps - a)]
        }
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = read_config(a.config.as_deref())?;
    let num_labels = cfg.extraction.palette.len();
    let (spec, data) = load_training_data(&a.data, a.controlnet, num_labels)?;
    let seed = cfg.train.seed;
    let mut state = if a.controlnet {
        let base = a
            .base
            .as_deref()
            .ok_or_else(|| anyhow!("--controlnet needs --base"))?;
        let ck = load_checkpoint(base).with_context(|| format!("checkpoint {}", base.display()))?;
        let mut state = ck.state;
        let m = &state.model.config;
        if (m.rows, m.cols) != (spec.rows, spec.cols) {
            bail!(
                "base model expects {}x{} images, data is {}x{}",
                m.rows,
                m.cols,
                spec.rows,
                spec.cols
            );
        }
        state.seed = seed;
        if !state.model.has_adapter() {
            state.attach_adapter(seed);
        }
        state
    } else {
        let model = ScoreModel::new(cfg.model_config(spec.rows, spec.cols), seed)?;
        TrainState::new(model, cfg.noise_schedule()?, seed)
    };

    let log_every = cfg.train.log_every;
    let every = cfg.train.checkpoint_every;
    for (phase, steps) in train_phases(&cfg, a.controlnet.then_some(a.phase)) {
        let tc = TrainConfig {
            steps,
            lr: cfg.train.lr,
            batch_size: cfg.train.batch_size,
            phase,
            ..TrainConfig::default()
        };
        let last = state.step + steps;
        let mut save_error = None;
        let observer = |step: u64, loss: f64, s: &TrainState| {
            if log_every > 0 && (step.is_multiple_of(log_every) || step == last) {
                println!("step {step} loss {loss:.6}");
            }
            if every > 0 && step.is_multiple_of(every) && save_error.is_none() {
                let ck = Checkpoint {
                    state: s.clone(),
                    sensor: Some(spec),
                };
                save_error = save_checkpoint(&a.out, &ck).err();
            }
        };
        state = match run_training(state, &data, &tc, observer) {
            Ok(run) => run.state,
            Err(ScoreError::Diverged { step, last_good }) => {
                let ck = Checkpoint {
                    state: *last_good,
                    sensor: Some(spec),
                };
                save_checkpoint(&a.out, &ck)?;
                bail!(
                    "training diverged at step {step}; last good state saved to {}",
                    a.out.display()
                );
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(e) = save_error {
            return Err(e).context("periodic checkpoint");
        }
    }
    save_checkpoint(
        &a.out,
        &Checkpoint {
            state,
            sensor: Some(spec),
        },
    )?;
    Ok(())
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    let ck =
        load_checkpoint(&a.ckpt).with_context(|| format!("checkpoint {}", a.ckpt.display()))?;
    let cfg = read_config(a.config.as_deref())?;
    let model = &ck.state.model;
    let spec = ck
        .sensor
        .ok_or_else(|| anyhow!("checkpoint {} has no sensor description", a.ckpt.display()))?;
    let cond = match &a.layout {
        Some(path) => {
            if !model.has_adapter() {
                bail!("conditioning on a layout needs an adapter checkpoint");
            }
            let layout = read_layout(path)?;
            let pose = parse_pose(a.pose.as_deref())?;
            let image = RaycastScene::new(&layout)?.render(&spec, &pose).image;
            Some(encode_condition(&image, cfg.extraction.palette.len()))
        }
        None => None,
    };
    let score = ModelScore {
        model,
        cond: cond.as_ref(),
    };
    ensure_dir(&a.out)?;
    for k in 0..a.num {
        let img = sample_range_image(
            &score,
            &ck.state.schedule,
            &cfg.sampler,
            &spec,
            a.seed.wrapping_add(k as u64),
        )?;
        let path = a.out.join(format!("sample_{k:04}.lri"));
        write_image(&path, &img)?;
        write_cloud(
            &sibling(&path, CLOUD_SUFFIX),
            &range_image_to_point_cloud(&img),
        )?;
    }
    Ok(())
}

fn pooled_histogram(
    clouds: &[LabeledPointCloud],
    grid: &BevGrid,
) -> Result<layout_lidar::metrics::Histogram> {
    let points: Vec<Point3> = clouds
        .iter()
        .flat_map(|c| c.points.iter().copied())
        .collect();
    Ok(bev_histogram(&points, grid)?)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let load = |dir: &Path| -> Result<Vec<_>> {
        list_images(dir)?.iter().map(|p| read_image(p)).collect()
    };
    let gen = load(&a.gen)?;
    let reference = load(&a.reference)?;
    let spec = gen[0].spec;
    let gen_clouds: Vec<_> = gen.iter().map(range_image_to_point_cloud).collect();
    let ref_clouds: Vec<_> = reference.iter().map(range_image_to_point_cloud).collect();

    let mut report: Vec<(String, f64)> = Vec::new();
    for metric in &a.metrics {
        let value = match metric.trim() {
            "jsd" => {
                let grid = BevGrid::centered(0.0, 0.0, spec.max_range, 1.0)?;
                jsd(
                    &pooled_histogram(&gen_clouds, &grid)?,
                    &pooled_histogram(&ref_clouds, &grid)?,
                )?
            }
            "mmd" => {
                let g: Vec<Vec<Point3>> = gen_clouds.iter().map(|c| c.points.clone()).collect();
                let r: Vec<Vec<Point3>> = ref_clouds.iter().map(|c| c.points.clone()).collect();
                mmd(&g, &r)?
            }
            "frechet" => {
                let fa: Vec<Vec<f64>> = gen.iter().map(log_depth_features).collect();
                let fb: Vec<Vec<f64>> = reference.iter().map(log_depth_features).collect();
                frechet(&FeatureSet::from_rows(&fa)?, &FeatureSet::from_rows(&fb)?)?
            }
            other => bail!("unknown metric {other:?}; expected jsd, mmd or frechet"),
        };
        report.push((metric.trim().to_string(), value));
    }
    if let Some(path) = &a.layout {
        let layout = read_layout(path)?;
        let pose = parse_pose(a.pose.as_deref())?;
        let rendered = RaycastScene::new(&layout)?.render(&spec, &pose).image;
        let own = range_image_to_point_cloud(&rendered);
        let n = gen_clouds.len() as f64;
        let (mut recall, mut iou) = (0.0, 0.0);
        for c in &gen_clouds {
            let lc = layout_consistency_against(&layout, c, &own, &spec, &pose);
            recall += lc.box_recall;
            iou += lc.bev_iou;
        }
        report.push(("box_recall".into(), recall / n));
        report.push(("bev_iou".into(), iou / n));
    }

    let mut text = String::new();
    for (k, v) in &report {
        let _ = writeln!(text, "{k}={v}");
    }
    print!("{text}");
    if let Some(path) = &a.csv {
        let mut csv = String::from("metric,value\n");
        for (k, v) in &report {
            let _ = writeln!(csv, "{k},{v}");
        }
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
