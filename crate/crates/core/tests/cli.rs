use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn bayeseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bayeseg"))
        .args(args)
        .output()
        .unwrap()
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn pgm_pixels(path: &Path) -> Vec<u8> {
    let bytes = fs::read(path).unwrap();
    let (h, w) = {
        let header = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).to_string();
        let mut it = header.split_whitespace().skip(1);
        let w: usize = it.next().unwrap().parse().unwrap();
        let h: usize = it.next().unwrap().parse().unwrap();
        (h, w)
    };
    bytes[bytes.len() - h * w..].to_vec()
}

#[test]
fn gen_data_writes_a_reproducible_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = bayeseg(&[
            "gen-data",
            "--out",
            p(d),
            "--n",
            "8",
            "--size",
            "32",
            "--seed",
            "3",
        ]);
        assert!(out.status.success(), "{}", text(&out));
    }
    let pgms = fs::read_dir(&a)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "pgm")
        })
        .count();
    assert_eq!(pgms, 16);
    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 9);
    assert_eq!(manifest.lines().next().unwrap(), "id,image,mask");
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
    let odd = bayeseg(&[
        "gen-data",
        "--out",
        p(&dir.path().join("c")),
        "--n",
        "1",
        "--size",
        "33",
    ]);
    assert!(odd.status.success());
    assert!(text(&odd).contains("warning"), "{}", text(&odd));
}

#[test]
fn train_resume_predict_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.bseg");
    assert!(
        bayeseg(&["gen-data", "--out", p(&data), "--n", "8", "--size", "32"])
            .status
            .success()
    );

    let out = bayeseg(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--epochs",
        "30",
        "--seed",
        "1",
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let csv = fs::read_to_string(dir.path().join("model.metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 31, "header plus one row per epoch");
    assert!(rows[0].starts_with("epoch,"));
    let col = rows[0].split(',').position(|c| c == "val_loss").unwrap();
    let val = |r: &str| r.split(',').nth(col).unwrap().parse::<f64>().unwrap();
    assert!(val(rows[30]) < val(rows[1]), "{} vs {}", rows[30], rows[1]);

    // resuming for zero epochs rewrites the identical checkpoint
    let again = dir.path().join("again.bseg");
    let out = bayeseg(&[
        "train",
        "--data",
        p(&data),
        "--resume",
        p(&ckpt),
        "--out",
        p(&again),
        "--epochs",
        "0",
    ]);
    assert!(out.status.success(), "{}", text(&out));
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());

    // one pass has no spread between passes, so the epistemic map is constant (white)
    let image = data.join("img_0000.pgm");
    let maps = dir.path().join("maps");
    let out = bayeseg(&[
        "predict",
        "--ckpt",
        p(&ckpt),
        "--image",
        p(&image),
        "--out",
        p(&maps),
        "--samples",
        "1",
    ]);
    assert!(out.status.success(), "{}", text(&out));
    assert!(text(&out).contains("mean total variance"));
    assert!(pgm_pixels(&maps.join("epistemic.pgm"))
        .iter()
        .all(|&b| b == 255));
    for name in ["mean_prob", "mask", "aleatoric"] {
        assert!(maps.join(format!("{name}.pgm")).exists());
    }

    let (m1, m2) = (dir.path().join("m1"), dir.path().join("m2"));
    for m in [&m1, &m2] {
        let out = bayeseg(&[
            "predict",
            "--ckpt",
            p(&ckpt),
            "--image",
            p(&image),
            "--out",
            p(m),
            "--samples",
            "5",
            "--seed",
            "4",
        ]);
        assert!(out.status.success());
    }
    for name in ["mean_prob", "mask", "aleatoric", "epistemic"] {
        let f = format!("{name}.pgm");
        assert_eq!(
            fs::read(m1.join(&f)).unwrap(),
            fs::read(m2.join(&f)).unwrap(),
            "{name}"
        );
    }

    let report = dir.path().join("eval.csv");
    let out = bayeseg(&[
        "evaluate",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--samples",
        "3",
        "--out",
        p(&report),
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let lines: Vec<String> = fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines[0], "image_id,dsc,iou");
    assert_eq!(lines.len(), 10);
    assert!(lines[9].starts_with("mean,"));
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(
        bayeseg(&["gen-data", "--out", p(&data), "--n", "2", "--size", "16"])
            .status
            .success()
    );
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "learning_rate = 0.01\nlerning_rate = 0.1\n").unwrap();
    let out = bayeseg(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("m.bseg")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("lerning_rate"), "{}", text(&out));

    let out = bayeseg(&[
        "train",
        "--data",
        p(&data),
        "--out",
        "x.bseg",
        "--optimizer",
        "rmsprop",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(bayeseg(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    fs::write(empty.join("manifest.csv"), "id,image,mask\n").unwrap();
    let ckpt = dir.path().join("m.bseg");
    let net = bayeseg::network::SegNet::new(Default::default(), 0).unwrap();
    bayeseg::data::save_checkpoint(&net, &ckpt).unwrap();
    let out = bayeseg(&["evaluate", "--ckpt", p(&ckpt), "--data", p(&empty)]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    assert!(text(&out).contains("empty"), "{}", text(&out));

    let corrupt = dir.path().join("corrupt.bseg");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[40] ^= 0xff;
    fs::write(&corrupt, bytes).unwrap();
    let image = dir.path().join("ok.pgm");
    bayeseg::data::write_image(&image, &bayeseg::Grid::zeros(&[16, 16])).unwrap();
    let out = bayeseg(&[
        "predict",
        "--ckpt",
        p(&corrupt),
        "--image",
        p(&image),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        text(&out).to_lowercase().contains("checksum"),
        "{}",
        text(&out)
    );

    let image = dir.path().join("broken.pgm");
    fs::write(&image, b"P5\n16 16\n255\n\x00").unwrap();
    let out = bayeseg(&[
        "predict",
        "--ckpt",
        p(&ckpt),
        "--image",
        p(&image),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selftest_passes_quickly() {
    let start = Instant::now();
    let out = bayeseg(&["selftest"]);
    assert!(start.elapsed() < Duration::from_secs(60));
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(!text(&out).contains("FAIL"));
}

#[test]
fn help_lists_defaults() {
    let out = bayeseg(&["train", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let help = text(&out);
    for needle in [
        "[default: 500]",
        "[default: 16]",
        "[default: adam]",
        "[default: 0.001]",
        "[default: 0.9]",
        "[default: 0.0005]",
        "[default: plateau]",
        "[default: 10]",
        "[default: 0.1]",
    ] {
        assert!(help.contains(needle), "missing {needle}");
    }
    assert_eq!(bayeseg(&["--help"]).status.code(), Some(0));
}
