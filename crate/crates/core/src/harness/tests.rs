use std::collections::{HashMap, HashSet};

use super::*;
use crate::conditioning::{ConditionBundle, InpaintMask};
use crate::error::Error;
use crate::hexplane::{HexPlane, PlaneDims, PlaneStats, Rates};
use crate::nn::NamedTensor;
use crate::occgrid::{read_grid, SemanticGrid};

fn tiny_config() -> RunConfig {
    RunConfig::parse(
        "preset = toy
         grid.t = 4
         grid.x = 8
         grid.y = 8
         grid.z = 4
         toy.sequences = 3
         toy.seed = 11
         latent.channels = 4
         vae.feat_channels = 8
         vae.dec_hidden = 8
         vae.dropout = 0
         vae.batch = 2
         vae.steps = 2
         vae.log_every = 1
         dit.width = 16
         dit.depth = 1
         dit.heads = 2
         dit.diffusion_steps = 4
         dit.steps = 2
         dit.batch = 2
         dit.log_every = 1",
    )
    .unwrap()
}

fn toy_grids(cfg: &RunConfig, dir: &std::path::Path) -> Vec<SemanticGrid> {
    cmd_gen_toy(cfg, dir, false).unwrap();
    read_dataset(dir).unwrap().into_iter().map(|(_, g)| g).collect()
}

#[test]
fn defaults_follow_stated_hyperparameters() {
    let c = RunConfig::default();
    assert_eq!((c.vae.lr, c.vae.alpha, c.vae.beta), (1e-3, 1.0, 0.005));
    assert_eq!((c.dit.lr, c.dit.ema_decay, c.dit.patch), (1e-4, 0.9999, 2));
    assert_eq!((c.latent_channels, c.rates), (16, Rates::uniform(2)));
    assert_eq!((c.dit.width, c.dit.depth, c.dit.heads, c.dit.diffusion_steps), (192, 8, 4, 200));
    let f = RunConfig::full();
    assert_eq!((f.dit.width, f.dit.depth, f.dit.heads, f.dit.diffusion_steps), (384, 16, 8, 1000));
    assert_eq!((f.vae.batch, f.dit.batch), (8, 128));
    let t = RunConfig::toy();
    assert_eq!((t.grid.t, t.grid.x, t.grid.y, t.grid.z, t.classes), (8, 32, 32, 8, 6));
    assert_eq!((t.toy_sequences, t.vae.steps, t.dit.steps, t.dit.diffusion_steps), (64, 2000, 5000, 200));
    for p in RunConfig::PRESETS {
        RunConfig::preset(p).unwrap().validate().unwrap();
    }
}

#[test]
fn config_text_round_trips() {
    for c in [RunConfig::toy(), RunConfig::full(), tiny_config()] {
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }
    let keys: Vec<String> =
        RunConfig::toy().to_text().lines().map(|l| l.split(" = ").next().unwrap().to_string()).collect();
    assert_eq!(keys, RunConfig::KEYS.to_vec());
    let mut c = RunConfig::toy();
    c.sample.seed = 5;
    assert_ne!(c.hash(), RunConfig::toy().hash());
}

#[test]
fn config_errors_are_config_errors() {
    for bad in [
        "vae.learning_rate = 1",
        "vae.lr",
        "vae.lr = fast",
        "vae.lr = 1\nvae.lr = 2",
        "preset = huge",
        "rate.x = 3",
        "grid.y = 16",
        "dit.heads = 5",
        "dit.schedule = cosine",
        "dit.task = translate",
        "sample.w = -2",
        "sample.deterministic = maybe",
        "grid.classes = 4",
        "dit.diffusion_steps = 0",
        "vae.batch = 0",
    ] {
        let e = RunConfig::parse(bad).unwrap_err();
        assert!(e.is_config(), "{bad:?} gave {e:?}");
    }
    let ok = RunConfig::parse("# comment only\n\npreset = toy  # trailing\n").unwrap();
    assert_eq!(ok, RunConfig::toy());
    let mut c = RunConfig::toy();
    assert!(c.set("preset", "full").unwrap_err().is_config());
    c.set("preset", "toy").unwrap();
    assert_eq!(c, RunConfig::toy());
}

fn sample_tensors() -> Vec<NamedTensor> {
    vec![
        NamedTensor { name: "a.weight".into(), shape: vec![2, 3], data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-20, 7.0, -1e30] },
        NamedTensor { name: "b".into(), shape: vec![1], data: vec![0.1] },
    ]
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let stats = PlaneStats { mean: (0..12).map(|i| i as f32 * 0.37).collect(), std: vec![0.9; 12], channels: 2 };
    let ck = Checkpoint { kind: CheckpointKind::Dit, config: tiny_config(), step: 42, stats: Some(stats), tensors: sample_tensors() };
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path, CheckpointKind::Dit).unwrap();
    assert_eq!(back, ck);
    for (a, b) in back.tensors.iter().zip(&ck.tensors) {
        assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    assert!(matches!(Checkpoint::load(&path, CheckpointKind::Vae), Err(Error::Format(_))));
}

#[test]
fn corrupted_checkpoints_are_version_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let ck = Checkpoint { kind: CheckpointKind::Vae, config: tiny_config(), step: 1, stats: None, tensors: sample_tensors() };
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Checkpoint::load(&path, CheckpointKind::Vae), Err(Error::Version { .. })));
    std::fs::write(&path, b"not a checkpoint at all").unwrap();
    assert!(matches!(Checkpoint::load(&path, CheckpointKind::Vae), Err(Error::Version { .. })));

    let needle = b"\"format_version\":\"1\"";
    let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
    let mut bumped = bytes.clone();
    bumped[at + needle.len() - 2] = b'9';
    std::fs::write(&path, &bumped).unwrap();
    match Checkpoint::load(&path, CheckpointKind::Vae) {
        Err(Error::Version { found, .. }) => assert!(found.contains('9')),
        other => panic!("{other:?}"),
    }
}

#[test]
fn archive_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let dims = PlaneDims::from_grid(crate::occgrid::GridDims::new(4, 8, 8, 4), Rates::uniform(2), 3).unwrap();
    let mut a = HexPlaneArchive::new(dims, Some(PlaneStats::identity(3)));
    for i in 0..3 {
        a.push(format!("seq_{i}"), HexPlane::random(dims, i)).unwrap();
    }
    assert!(a.push("x", HexPlane::random(PlaneDims::latent(2, 4, 4, 2, 3), 0)).is_err());
    let p = dir.path().join("a.safetensors");
    a.save(&p).unwrap();
    assert_eq!(HexPlaneArchive::load(&p).unwrap(), a);
    let empty = HexPlaneArchive::new(dims, None);
    empty.save(&p).unwrap();
    assert_eq!(HexPlaneArchive::load(&p).unwrap(), empty);
}

#[test]
fn raster_and_trajectory_files() {
    let r = BoolRaster { shape: vec![2, 3], cells: vec![true, false, false, true, true, false] };
    let bytes = r.encode().unwrap();
    assert_eq!(&bytes[..4], b"OCB1");
    assert_eq!(bytes.len(), 6 + 8 + 6);
    assert_eq!(BoolRaster::decode(&bytes).unwrap(), r);
    assert!(matches!(BoolRaster::decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[14] = 2;
    assert!(matches!(BoolRaster::decode(&bad), Err(Error::Format(_))));
    assert!(BoolRaster { shape: vec![4], cells: vec![true; 4] }.encode().is_err());

    let traj = vec![[0.0, 0.5], [1.25, -2.0], [3.0, 1e-3]];
    assert_eq!(parse_trajectory(&trajectory_csv(&traj)).unwrap(), traj);
    assert_eq!(parse_trajectory("0,1,2\n1, 3 ,4\n").unwrap(), vec![[1.0, 2.0], [3.0, 4.0]]);
    assert!(parse_trajectory("t,x,y\n1,0,0\n").is_err());
    assert!(parse_trajectory("0,1\n").is_err());
    assert!(parse_trajectory("0,a,1\n").is_err());
}

#[test]
fn gen_toy_is_deterministic_and_guards_output() {
    let mut cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = cmd_gen_toy(&cfg, &a, false).unwrap();
    cmd_gen_toy(&cfg, &b, false).unwrap();
    assert_eq!(ra.files.len(), 3);
    for f in &ra.files {
        let name = f.file_name().unwrap();
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    let manifest = std::fs::read_to_string(&ra.manifest).unwrap();
    assert_eq!(manifest, "seq_0000.ocg\t11\nseq_0001.ocg\t12\nseq_0002.ocg\t13\n");

    assert!(cmd_gen_toy(&cfg, &a, false).unwrap_err().is_config());
    cfg.toy_sequences = 1;
    let forced = cmd_gen_toy(&cfg, &a, true).unwrap();
    assert_eq!(list_dataset(&a).unwrap(), forced.files);

    cfg.toy_sequences = 0;
    let empty = cmd_gen_toy(&cfg, &dir.path().join("c"), false).unwrap();
    assert!(empty.files.is_empty() && empty.warning.is_some());
    assert_eq!(std::fs::read_to_string(empty.manifest).unwrap(), "");
}

#[test]
fn batches_cover_each_epoch_once() {
    let mut cache = HashMap::new();
    let mut seen = Vec::new();
    for step in 0..5 {
        seen.extend(batch_indices(10, 2, step, 3, &mut cache));
    }
    assert_eq!(seen.iter().copied().collect::<HashSet<_>>().len(), 10);
    let mut fresh = HashMap::new();
    assert_eq!(batch_indices(10, 2, 3, 3, &mut fresh), seen[6..8].to_vec());
}

#[test]
fn run_dir_and_record() {
    let dir = tempfile::tempdir().unwrap();
    let rd = RunDir(dir.path().to_path_buf());
    assert_eq!(rd.resolve("x/y"), dir.path().join("x/y"));
    assert_eq!(rd.resolve("/abs"), std::path::PathBuf::from("/abs"));
    let rec = RunRecord {
        command: "sample".into(),
        args: vec!["--seed".into(), "3".into()],
        config: tiny_config(),
        seeds: vec![("sample".into(), 3)],
        deterministic: true,
    };
    let p = rec.write(dir.path()).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
    assert_eq!(v["config_hash"], tiny_config().hash());
    assert_eq!(RunConfig::parse(v["config"].as_str().unwrap()).unwrap(), tiny_config());
    assert_eq!(v["seeds"]["sample"], 3);
}

#[test]
fn tiny_pipeline_end_to_end() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let grids = toy_grids(&cfg, &data_dir);

    // VAE: two steps straight, or one step then a resume.
    let mut logs = Vec::new();
    let (vae_ck, log) = cmd_train_vae(&cfg, &grids, None, Budget::steps(2), |r| logs.push(*r)).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(logs, log);
    assert!(log.iter().all(|r| r.probe_miou.is_some() && r.kl.is_finite()));
    let (half, _) = cmd_train_vae(&cfg, &grids, None, Budget::steps(1), |_| {}).unwrap();
    let (resumed, rlog) = cmd_train_vae(&cfg, &grids, Some(&half), Budget::steps(2), |_| {}).unwrap();
    assert_eq!(resumed.step, 2);
    assert_eq!(rlog.len(), 1);
    assert_eq!(rlog[0].total, log[1].total);
    let ck_path = dir.path().join("vae.safetensors");
    vae_ck.save(&ck_path).unwrap();
    let vae_ck = Checkpoint::load(&ck_path, CheckpointKind::Vae).unwrap();
    assert!(vae_ck.stats.is_some());

    // Encoding is deterministic and one entry per sequence.
    let data = read_dataset(&data_dir).unwrap();
    let arch = cmd_encode(&vae_ck, &data, false).unwrap();
    assert_eq!(arch.len(), 3);
    assert_eq!(arch, cmd_encode(&vae_ck, &data, false).unwrap());
    let decoded = cmd_decode(&vae_ck, &arch).unwrap();
    let vae = build_vae(&vae_ck).unwrap();
    assert_eq!(decoded, vae.reconstruct(&grids.iter().collect::<Vec<_>>()).unwrap());

    // Denoiser, unconditional and forecasting.
    let (dit_ck, dlog) = cmd_train_dit(&cfg, &arch, None, Budget::steps(2), |_| {}).unwrap();
    assert_eq!(dlog.len(), 2);
    assert!(dlog.iter().all(|r| r.mse.is_finite()));
    let (more, _) = cmd_train_dit(&cfg, &arch, Some(&dit_ck), Budget::steps(3), |_| {}).unwrap();
    assert_eq!(more.step, 3);
    let gen = build_generator(&dit_ck, true).unwrap();
    let cond = ConditionBundle::none().with_hexplane(arch.items[0].clone());
    let s0 = cmd_sample(&vae, &gen, Some(&cond), 0.0, 5, 2).unwrap();
    assert_eq!(s0.len(), 2);
    let direct = vae.decode(&[gen.sample(Some(&cond), 0.0, 5).unwrap()]).unwrap();
    assert_eq!(s0[0], direct[0]);

    let mut fcfg = cfg.clone();
    fcfg.dit.task = DitTask::Forecast;
    let mut pairs = arch.clone();
    pairs.names.pop();
    pairs.items.pop();
    let (fck, _) = cmd_train_dit(&fcfg, &pairs, None, Budget::steps(1), |_| {}).unwrap();
    let fgen = build_generator(&fck, true).unwrap();
    let pred = cmd_forecast(&vae, &fgen, &grids[0], 1.0, 0).unwrap();
    assert_eq!(pred.dims(), grids[0].dims());
    assert!(cmd_train_dit(&fcfg, &arch, None, Budget::steps(1), |_| {}).is_err());

    // Inpainting with an empty mask reproduces decode(encode(input)).
    let d = vae.latent_dims();
    let out = cmd_inpaint(&vae, &gen, &grids[1], &InpaintMask::empty(d.x, d.y), None, 1.0, 2).unwrap();
    assert_eq!(out, vae.decode(&vae.encode_mean(&[&grids[1]]).unwrap()).unwrap()[0]);
    let op = cmd_outpaint(&vae, &gen, &grids[1], 1, None, 1.0, 2).unwrap();
    assert_eq!(op.dims(), grids[1].dims());

    // Evaluating a dataset against itself.
    let rep = cmd_eval(&grids, &grids, Some(&vae), false).unwrap();
    assert_eq!(rep.miou, 1.0);
    assert!(rep.fid.unwrap().abs() < 1e-6, "{:?}", rep.fid);
    assert!(rep.to_text().contains("miou = 1.000000"));
    assert!(cmd_eval(&grids[..2], &grids, None, false).is_err());
}

#[test]
fn split_encoding_and_dataset_checks() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let mut long = cfg.clone();
    long.grid.t = 8;
    long.toy_sequences = 1;
    cmd_gen_toy(&long, &dir.path().join("long"), false).unwrap();
    let data = read_dataset(dir.path().join("long")).unwrap();
    let vae = crate::vae::VaeModel::new(cfg.vae_config(), 0).unwrap();
    let ck = Checkpoint { kind: CheckpointKind::Vae, config: cfg.clone(), step: 0, stats: None, tensors: vae.snapshot().unwrap() };
    let arch = cmd_encode(&ck, &data, true).unwrap();
    assert_eq!(arch.names, vec!["seq_0000#0", "seq_0000#1"]);
    let second = data[0].1.frames(4, 4).unwrap();
    assert_eq!(arch.items[1], vae.encode_mean(&[&second]).unwrap()[0]);
    assert!(matches!(cmd_encode(&ck, &data, false), Err(Error::Dims(_))));
    let g = read_grid(dir.path().join("long/seq_0000.ocg")).unwrap();
    assert!(matches!(cmd_train_vae(&cfg, &[g], None, Budget::steps(1), |_| {}), Err(Error::Dims(_))));
}
