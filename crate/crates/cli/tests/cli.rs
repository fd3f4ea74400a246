//! End-to-end tests of the command-line surface: corpus generation, the
//! three training phases, seeded inference, evaluation and the ablation
//! report. Everything runs against a deliberately tiny configuration so the
//! whole trip finishes in test time.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use firstfill_core::config::{
    DataConfig, DiffusionConfig, FffConfig, FreezePolicy, InferConfig, MaskConfig, RunConfig,
    TrainConfig, UNetConfig, VaeConfig,
};
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_firstfill"));
    // Tests control these explicitly; never inherit them from the host shell.
    cmd.env_remove("FIRSTFILL_OUT_ROOT");
    cmd.env_remove("FIRSTFILL_WORKERS");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn firstfill");
    assert!(
        out.status.success(),
        "command failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn run_expect_code(cmd: &mut Command, code: i32) -> String {
    let out = cmd.output().expect("spawn firstfill");
    assert_eq!(
        out.status.code(),
        Some(code),
        "expected exit code {code}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small-but-real settings: 4 frames of 32x32, an 8x8 latent grid, a
/// two-level denoiser and single-digit step counts per phase.
fn tiny_config() -> RunConfig {
    RunConfig {
        data: DataConfig {
            frames: 4,
            height: 32,
            width: 32,
            shapes_min: 1,
            shapes_max: 2,
            max_speed: 2,
            bg_max_speed: 1,
            mask: MaskConfig {
                stationary_fraction: 0.5,
                coverage_min: 0.12,
                coverage_max: 0.35,
                object_dilation: 2,
            },
        },
        vae: VaeConfig {
            latent_channels: 2,
            widths: [8, 16],
            groups: 8,
            kl_weight: 1e-6,
            lr: 2e-3,
            steps: 3,
            batch_frames: 4,
            seed: 1,
        },
        diffusion: DiffusionConfig {
            timesteps: 40,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 4,
        },
        unet: UNetConfig {
            widths: vec![8, 16],
            temporal_levels: vec![1],
            groups: 8,
            time_dim: 16,
            seed: 2,
        },
        fff: FffConfig {
            enable_propagation: true,
            enable_alignment: true,
            dna_width: 8,
            dna_clamp: 4.0,
            validity_threshold: 0.5,
        },
        train: TrainConfig {
            pretrain_steps: 2,
            finetune_steps: 2,
            lr_pretrain: 1e-3,
            lr_finetune: 5e-4,
            finetune_freeze: FreezePolicy::TemporalOnly,
            log_every: 1,
            seed: 3,
        },
        infer: InferConfig {
            use_inversion: true,
            seed: 5,
        },
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json_pretty()).unwrap();
    path
}

fn csv_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
        .lines()
        .map(str::to_string)
        .collect()
}

fn png_names(dir: &Path, prefix: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for i in 0.. {
        let p = dir.join(format!("{prefix}_{i:04}.png"));
        if !p.exists() {
            break;
        }
        out.push(p);
    }
    out
}

#[test]
fn gen_data_layout_seed_and_force() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let out_a = tmp.path().join("corpus_a");
    let out_b = tmp.path().join("corpus_b");

    run_ok(bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&out_a).args([
        "--clips", "2", "--seed", "7",
    ]));
    assert!(out_a.join("clip_0000").is_dir());
    assert!(out_a.join("clip_0001").is_dir());
    assert!(!out_a.join("clip_0002").exists());
    assert!(out_a.join("corpus.json").is_file());
    assert_eq!(png_names(&out_a.join("clip_0000"), "frame").len(), 4);
    assert_eq!(png_names(&out_a.join("clip_0000"), "mask").len(), 4);
    assert!(out_a.join("clip_0000").join("gt.npz").is_file());

    // Same seed into a fresh directory: byte-identical manifest.
    run_ok(bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&out_b).args([
        "--clips", "2", "--seed", "7",
    ]));
    assert_eq!(
        std::fs::read(out_a.join("corpus.json")).unwrap(),
        std::fs::read(out_b.join("corpus.json")).unwrap(),
        "same (config, seed) must produce identical manifests"
    );

    // Refuses to clobber a non-empty directory unless forced.
    let stderr = run_expect_code(
        bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&out_a).args([
            "--clips", "2", "--seed", "7",
        ]),
        3,
    );
    assert!(stderr.contains("--force"), "stderr should point at --force: {stderr}");
    run_ok(bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&out_a).args([
        "--clips", "2", "--seed", "7", "--force",
    ]));
}

#[test]
fn out_root_env_rebases_relative_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    run_ok(
        bin()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .args(["--out", "rel_corpus", "--clips", "1", "--seed", "1"])
            .env("FIRSTFILL_OUT_ROOT", tmp.path())
            .env("FIRSTFILL_WORKERS", "1"),
    );
    assert!(
        tmp.path().join("rel_corpus").join("corpus.json").is_file(),
        "relative --out must land under FIRSTFILL_OUT_ROOT"
    );
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let mut value: serde_json::Value =
        serde_json::from_str(&tiny_config().to_json_pretty()).unwrap();
    value["data"]["typo_field"] = serde_json::json!(1);
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, serde_json::to_vec_pretty(&value).unwrap()).unwrap();
    let stderr = run_expect_code(
        bin()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(tmp.path().join("out"))
            .args(["--clips", "1"]),
        2,
    );
    assert!(stderr.contains("typo_field"), "stderr should name the bad key: {stderr}");
}

#[test]
fn finetune_without_pretrain_checkpoint_is_explicit() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let corpus = tmp.path().join("corpus");
    run_ok(bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&corpus).args([
        "--clips", "2", "--seed", "3",
    ]));
    let stderr = run_expect_code(
        bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--phase", "finetune", "--corpus"])
            .arg(&corpus)
            .arg("--out")
            .arg(tmp.path().join("run")),
        3,
    );
    assert!(stderr.contains("pretrain"), "stderr should name the missing phase: {stderr}");
}

#[test]
fn eval_without_a_corpus_is_explicit() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    run_expect_code(
        bin()
            .args(["eval", "--pred"])
            .arg(&empty)
            .arg("--gt")
            .arg(&empty)
            .arg("--out")
            .arg(tmp.path().join("report.csv")),
        3,
    );
}

/// One sequential trip over the whole surface: corpus, three training
/// phases (with a resume), inference flags and determinism, evaluation
/// against ground truth, and the four-variant ablation report.
#[test]
fn round_trip_train_infer_eval_ablate() {
    let tmp = TempDir::new().unwrap();
    let cfg_obj = tiny_config();
    let cfg = write_config(tmp.path(), &cfg_obj);
    let corpus = tmp.path().join("corpus");
    let run = tmp.path().join("run");

    run_ok(bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&corpus).args([
        "--clips", "3", "--seed", "9",
    ]));

    // Autoencoder phase: loss CSV rows equal optimizer steps.
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--phase", "vae", "--corpus"])
            .arg(&corpus)
            .arg("--out")
            .arg(&run),
    );
    let vae_rows = csv_lines(&run.join("vae_loss.csv"));
    assert_eq!(vae_rows[0], "step,loss");
    assert_eq!(vae_rows.len() - 1, cfg_obj.vae.steps);
    assert!(run.join("vae.ckpt").is_file());

    // Pretrain consumes the autoencoder checkpoint.
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--phase", "pretrain", "--corpus"])
            .arg(&corpus)
            .arg("--out")
            .arg(&run),
    );
    assert_eq!(csv_lines(&run.join("pretrain_loss.csv")).len() - 1, 2);

    // Resume with a raised budget appends to the curve instead of restarting.
    let mut longer = cfg_obj.clone();
    longer.train.pretrain_steps = 4;
    let cfg_longer = tmp.path().join("config_longer.json");
    std::fs::write(&cfg_longer, longer.to_json_pretty()).unwrap();
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&cfg_longer)
            .args(["--phase", "pretrain", "--corpus"])
            .arg(&corpus)
            .arg("--out")
            .arg(&run)
            .arg("--resume")
            .arg(run.join("pretrain.ckpt")),
    );
    let pre_rows = csv_lines(&run.join("pretrain_loss.csv"));
    assert_eq!(pre_rows.len() - 1, 4, "resume must append, not restart");
    assert!(pre_rows[1].starts_with("0,") && pre_rows[4].starts_with("3,"));

    // All three finetune variants share the pretrain checkpoint.
    for variant in ["no-fff", "lp", "lp-dna"] {
        run_ok(
            bin()
                .args(["train", "--config"])
                .arg(&cfg)
                .args(["--phase", "finetune", "--variant", variant, "--corpus"])
                .arg(&corpus)
                .arg("--out")
                .arg(&run),
        );
        let key = variant.replace('-', "_");
        assert!(run.join(format!("finetune_{key}.ckpt")).is_file());
        assert_eq!(csv_lines(&run.join(format!("finetune_{key}_loss.csv"))).len() - 1, 2);
    }

    // A finetune config that relaxes the freeze policy is rejected up front.
    let mut unfrozen = cfg_obj.clone();
    unfrozen.train.finetune_freeze = FreezePolicy::None;
    let cfg_unfrozen = tmp.path().join("config_unfrozen.json");
    std::fs::write(&cfg_unfrozen, unfrozen.to_json_pretty()).unwrap();
    let stderr = run_expect_code(
        bin()
            .args(["train", "--config"])
            .arg(&cfg_unfrozen)
            .args(["--phase", "finetune", "--corpus"])
            .arg(&corpus)
            .arg("--out")
            .arg(&run),
        2,
    );
    assert!(stderr.contains("temporal_only"), "stderr: {stderr}");

    // Inference: full path with inversion, twice with the same seed.
    let ckpt = run.join("finetune_lp_dna.ckpt");
    let clip0 = corpus.join("clip_0000");
    let pred_a = tmp.path().join("pred_a");
    let pred_b = tmp.path().join("pred_b");
    for out in [&pred_a, &pred_b] {
        run_ok(
            bin()
                .args(["infer", "--checkpoint"])
                .arg(&ckpt)
                .arg("--input")
                .arg(&clip0)
                .arg("--out")
                .arg(out),
        );
    }
    let frames_a = png_names(&pred_a, "frame");
    assert_eq!(frames_a.len(), 4, "output frame count must match the input");
    for (a, b) in frames_a.iter().zip(png_names(&pred_b, "frame")) {
        assert_eq!(
            std::fs::read(a).unwrap(),
            std::fs::read(&b).unwrap(),
            "same seed must produce byte-identical frames"
        );
    }
    let run_json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(pred_a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run_json["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(run_json["use_inversion"], serde_json::json!(true));
    assert_eq!(run_json["steps"], serde_json::json!(4));

    // Baseline path: every branch off.
    run_ok(
        bin()
            .args(["infer", "--checkpoint"])
            .arg(&ckpt)
            .arg("--input")
            .arg(&clip0)
            .arg("--out")
            .arg(tmp.path().join("pred_plain"))
            .args(["--no-lp", "--no-dna", "--no-inversion"]),
    );
    let plain_json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("pred_plain/run.json")).unwrap())
            .unwrap();
    assert_eq!(plain_json["use_inversion"], serde_json::json!(false));
    assert_eq!(plain_json["propagation"], serde_json::json!(false));
    assert_eq!(plain_json["alignment"], serde_json::json!(false));

    // Mask directory with the wrong count is a data error.
    let short_masks = tmp.path().join("short_masks");
    std::fs::create_dir(&short_masks).unwrap();
    std::fs::copy(clip0.join("mask_0000.png"), short_masks.join("mask_0000.png")).unwrap();
    let stderr = run_expect_code(
        bin()
            .args(["infer", "--checkpoint"])
            .arg(&ckpt)
            .arg("--input")
            .arg(&clip0)
            .arg("--mask")
            .arg(&short_masks)
            .arg("--out")
            .arg(tmp.path().join("pred_short")),
        3,
    );
    assert!(stderr.contains("mask"), "stderr: {stderr}");

    // Evaluation with predictions equal to ground truth: capped PSNR and
    // perfect SSIM on every row, and the aggregate equals the row mean.
    let predeq = tmp.path().join("predeq");
    for clip in ["clip_0000", "clip_0001", "clip_0002"] {
        let dst = predeq.join(clip);
        std::fs::create_dir_all(&dst).unwrap();
        for frame in png_names(&corpus.join(clip), "frame") {
            std::fs::copy(&frame, dst.join(frame.file_name().unwrap())).unwrap();
        }
    }
    let report = tmp.path().join("report.csv");
    run_ok(
        bin()
            .args(["eval", "--pred"])
            .arg(&predeq)
            .arg("--gt")
            .arg(&corpus)
            .arg("--flows")
            .arg("--out")
            .arg(&report),
    );
    let rows = csv_lines(&report);
    assert_eq!(rows[0], "clip_id,psnr,psnr_masked,ssim,e_warp_x1e3,vfid_proxy");
    assert_eq!(rows.len(), 1 + 3 + 1, "three clips plus the aggregate row");
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for row in &rows[1..4] {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[1], "99.000000", "pred == gt must hit the PSNR cap: {row}");
        assert_eq!(cells[2], "99.000000", "masked PSNR is capped too: {row}");
        assert_eq!(cells[3], "1.000000", "pred == gt must give SSIM 1: {row}");
        let warp: f64 = cells[4].parse().expect("e_warp cell filled when --flows is set");
        assert!(warp.is_finite());
        psnr_sum += cells[1].parse::<f64>().unwrap();
        ssim_sum += cells[3].parse::<f64>().unwrap();
    }
    let agg: Vec<&str> = rows[4].split(',').collect();
    assert_eq!(agg[0], "aggregate");
    assert!((agg[1].parse::<f64>().unwrap() - psnr_sum / 3.0).abs() < 1e-6);
    assert!((agg[3].parse::<f64>().unwrap() - ssim_sum / 3.0).abs() < 1e-6);
    assert_eq!(agg[5], "", "no checkpoint given, so no feature distance");
    let report_json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(report.with_extension("json")).unwrap()).unwrap();
    assert_eq!(
        report_json["corpus_hash"].as_str().unwrap().len(),
        64,
        "report manifest must embed the corpus hash"
    );

    // A prediction recorded against a different corpus is refused unless
    // explicitly allowed.
    std::fs::write(
        predeq.join("clip_0000/run.json"),
        serde_json::json!({"corpus_hash": "deadbeef"}).to_string(),
    )
    .unwrap();
    let stderr = run_expect_code(
        bin()
            .args(["eval", "--pred"])
            .arg(&predeq)
            .arg("--gt")
            .arg(&corpus)
            .arg("--out")
            .arg(&report),
        3,
    );
    assert!(stderr.contains("corpus"), "stderr: {stderr}");
    run_ok(
        bin()
            .args(["eval", "--pred"])
            .arg(&predeq)
            .arg("--gt")
            .arg(&corpus)
            .args(["--allow-mixed", "--out"])
            .arg(&report),
    );
    std::fs::remove_file(predeq.join("clip_0000/run.json")).unwrap();

    // A missing prediction directory is a data error.
    std::fs::rename(predeq.join("clip_0002"), tmp.path().join("stash")).unwrap();
    run_expect_code(
        bin()
            .args(["eval", "--pred"])
            .arg(&predeq)
            .arg("--gt")
            .arg(&corpus)
            .arg("--out")
            .arg(&report),
        3,
    );

    // Ablation report covers all four variants over the whole corpus.
    let abl = tmp.path().join("ablation");
    run_ok(
        bin()
            .args(["ablate", "--config"])
            .arg(&cfg)
            .arg("--corpus")
            .arg(&corpus)
            .arg("--checkpoints")
            .arg(&run)
            .arg("--out")
            .arg(&abl),
    );
    let abl_rows = csv_lines(&abl.join("ablation.csv"));
    assert_eq!(
        abl_rows.len(),
        1 + 4 * (3 + 1),
        "header plus four variants of three clips and an aggregate each"
    );
    for key in ["no_fff", "lp", "lp_dna", "lp_dna_inv"] {
        assert!(
            abl_rows.iter().any(|r| r.starts_with(&format!("{key},"))),
            "missing variant {key}"
        );
    }
    let abl_json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(abl.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(abl_json["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(abl_json["corpus_hash"].as_str().unwrap().len(), 64);
}
