use std::path::Path;
use std::process::{Command, Output};

fn unitsep(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_unitsep"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "unitsep {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn stage_by_stage_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let small = ["--preset", "smoke"];

    unitsep(&[&["synth-data", "--out", "corpus", "--train", "4", "--test", "2"][..], &small].concat(), dir);
    let check = stdout(&unitsep(&["ingest-check", "--root", "corpus"], dir));
    assert!(check.contains("tr: 4 mixtures, 2 stems, 8000 Hz"), "{check}");
    assert!(check.contains("tt: 2 mixtures"), "{check}");

    unitsep(&[&["train-codebook", "--corpus", "corpus", "--out", "cb.cb", "--units", "8"][..], &small].concat(), dir);
    unitsep(&["quantize", "--codebook", "cb.cb", "--out", "units", "corpus/tr/s1/tr_00000.wav"], dir);
    let units = std::fs::read_to_string(dir.join("units/tr_00000.units")).unwrap();
    assert!(units.starts_with("# units frame_hop=160"));

    let asr = [
        "train-asr", "--corpus", "corpus", "--codebook", "cb.cb", "--out", "asr.ckpt", "--steps", "2", "--log", "asr.jsonl",
    ];
    unitsep(&[&asr[..], &small].concat(), dir);
    // resuming at the final step trains nothing more
    unitsep(&[&asr[..], &small, &["--resume", "--checkpoint-every", "1"]].concat(), dir);
    unitsep(
        &[&["train-vocoder", "--corpus", "corpus", "--codebook", "cb.cb", "--out", "voc.ckpt", "--steps", "2"][..], &small].concat(),
        dir,
    );
    unitsep(
        &[
            &["train-refiner", "--corpus", "corpus", "--codebook", "cb.cb", "--asr", "asr.ckpt", "--out", "ref.ckpt", "--steps", "2"][..],
            &small,
        ]
        .concat(),
        dir,
    );

    let mixes = ["corpus/tt/mix/tt_00000.wav", "corpus/tt/mix/tt_00001.wav"];
    let sep = [
        "separate", "--asr", "asr.ckpt", "--codebook", "cb.cb", "--vocoder", "voc.ckpt", "--refiner", "ref.ckpt", "--out", "est",
    ];
    unitsep(&[&sep[..], &mixes].concat(), dir);
    for f in ["tt_00000_s1.wav", "tt_00000_s2.wav", "tt_00001_s2.units"] {
        assert!(dir.join("est").join(f).is_file(), "{f} missing");
    }

    unitsep(
        &["evaluate", "--corpus", "corpus", "--estimates", "est", "--system", "refined", "--out", "refined.jsonl"],
        dir,
    );
    let table = stdout(&unitsep(&["report", "--out", "report", "--plots", "refined.jsonl"], dir));
    assert!(table.contains("refined"), "{table}");
    for f in ["table3.csv", "table4.csv", "summary.txt", "overlap_ratio.svg"] {
        assert!(dir.join("report").join(f).is_file(), "{f} missing");
    }

    // a two-stream model cannot enhance
    let enhance = Command::new(env!("CARGO_BIN_EXE_unitsep"))
        .args(["enhance", "--asr", "asr.ckpt", "--codebook", "cb.cb", "--out", "enh", mixes[0]])
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(!enhance.status.success());
    assert!(String::from_utf8_lossy(&enhance.stderr).contains("single-stream"));
}

#[test]
fn run_reports_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let first = stdout(&unitsep(&["run", "--preset", "smoke", "--output-dir", "exp", "--plots"], dir));
    assert!(first.contains("predicted"), "{first}");
    assert!(dir.join("exp/report/sdr.svg").is_file());
    let second = stdout(&unitsep(&["run", "--config", "exp/config.toml", "--sequential"], dir));
    assert!(second.contains("reused stages: codebook, quantize, asr, refiner, evaluate"), "{second}");
}

#[test]
fn bad_overrides_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_unitsep"))
        .args(["run", "--preset", "smoke", "--set", "discretizer.units=1", "--output-dir", "x"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}
