use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tilevlm::grid::{split_into_tiles, stitch_tiles, GridSpec, TileSet};
use tilevlm::image::{bilinear_resize, read_png, write_png, RasterImage};
use tilevlm::manifest::{RunManifest, RunStatus, MANIFEST_FILE};

fn tilevlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilevlm"))
        .args(args)
        .env_remove("TILEVLM_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tilevlm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sample_image(dir: &Path) -> std::path::PathBuf {
    let img = RasterImage::new(
        50,
        70,
        1,
        (0..50 * 70).map(|i| ((i * 37) % 256) as f32 / 255.0).collect(),
    )
    .unwrap();
    let p = dir.join("input.png");
    write_png(&img, &p).unwrap();
    p
}

fn png_roundtrip(img: &RasterImage, dir: &Path) -> RasterImage {
    let p = dir.join("roundtrip.png");
    write_png(img, &p).unwrap();
    read_png(&p).unwrap()
}

const SMALL_RUN: &str = r#"
seed = 5

[model.grid]
rows = 2
cols = 2
include_global = false
view_side = 16

[model.encoder]
patch_size = 8
embed_dim = 8
depth = 1
heads = 2
mlp_ratio = 2.0
view_side = 16

[model.decoder]
vocab_size = 256
d_lm = 16
depth = 1
heads = 2
max_seq = 96

[model.lora]
rank = 2
alpha = 4.0

[task]
task = "detail"
image_side = 32
glyph_side = 8
n_glyphs = 4

[data]
train = 8
test = 4

[pretrain]
steps = 2
batch_size = 2

[finetune]
steps = 2
batch_size = 2
"#;

#[test]
fn tile_with_global_writes_five_views_that_restitch() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample_image(dir.path());
    let out = dir.path().join("tiles");
    ok(&["tile", "--grid", "2x2", "--global", "--view-side", "16", path(&input), path(&out)]);
    let pngs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .collect();
    assert_eq!(pngs.len(), 5);
    let index: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("tiles.json")).unwrap()).unwrap();
    let views = index["views"].as_array().unwrap();
    assert_eq!(views.len(), 5);
    assert_eq!(views[4]["provenance"], "global");
    assert_eq!(views[1]["canvas_origin"], serde_json::json!([0, 16]));

    let spec = GridSpec::new(2, 2, true, 16).unwrap();
    let tiles: Vec<RasterImage> = views[..4]
        .iter()
        .map(|v| read_png(&out.join(v["file"].as_str().unwrap())).unwrap())
        .collect();
    let set = TileSet {
        tiles,
        global_view: None,
    };
    let stitched = stitch_tiles(&set, &GridSpec { include_global: false, ..spec }).unwrap();
    let img = read_png(&input).unwrap();
    let canvas = bilinear_resize(&img, 32, 32).unwrap();
    assert_eq!(stitched, png_roundtrip(&canvas, dir.path()));
    let global = read_png(&out.join(views[4]["file"].as_str().unwrap())).unwrap();
    let expected = split_into_tiles(&img, &spec).unwrap().global_view.unwrap();
    assert_eq!(global, png_roundtrip(&expected, dir.path()));

    let m = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.status, RunStatus::Completed);
    assert_eq!(m.outputs.len(), 6);
}

#[test]
fn baseline_tile_is_the_resized_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample_image(dir.path());
    let out = dir.path().join("one");
    ok(&["tile", "--grid", "1x1", "--view-side", "24", path(&input), path(&out)]);
    let tile = read_png(&out.join("00_tile0.png")).unwrap();
    let resized = bilinear_resize(&read_png(&input).unwrap(), 24, 24).unwrap();
    assert_eq!(tile, png_roundtrip(&resized, dir.path()));
}

#[test]
fn missing_input_is_an_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = tilevlm(&["tile", path(&dir.path().join("absent.png")), path(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(4));
    let m = RunManifest::load(&dir.path().join("o").join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.status, RunStatus::Failed);
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nunknown = true\n").unwrap();
    let out = tilevlm(&["train", path(&cfg), "--out", path(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = tilevlm(&["tile", "--grid", "0x2", "x.png", "y"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["gen", "--task", "coherence", "--n", "6", "--seed", "9", "--out", path(&a)]);
    ok(&["gen", "--task", "coherence", "--n", "6", "--seed", "9", "--out", path(&b)]);
    let ia = fs::read_to_string(a.join("index.jsonl")).unwrap();
    assert_eq!(ia, fs::read_to_string(b.join("index.jsonl")).unwrap());
    assert_eq!(ia.lines().count(), 6);
    let samples = tilevlm::eval::read_samples(&a).unwrap();
    assert_eq!(samples.len(), 6);
    assert!(samples.iter().all(|s| s.answer == b"y" || s.answer == b"n"));
}

#[test]
fn output_root_env_relocates_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tilevlm"))
        .args(["gen", "--task", "detail", "--n", "2", "--out", "rel"])
        .env("TILEVLM_OUTPUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("rel").join("index.jsonl").exists());
}

#[test]
fn cost_sweep_formats() {
    let csv = ok(&["cost", "--sweep", "1x1,2x2,2x2+g,3x3,3x3+g", "--format", "csv"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("config,"));
    assert!(lines[1].starts_with("1x1,"));
    let json = ok(&["cost", "--format", "json", "--preset", "toy"]);
    let reports: serde_json::Value = serde_json::from_str(&json).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 5);
    assert_eq!(reports[0]["overhead"], 0.0);
    let table = ok(&["cost"]);
    assert!(table.contains("3x3+g"));
}

#[test]
fn train_inspect_export_replay_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let run = dir.path().join("run");
    ok(&["--threads", "1", "train", path(&cfg), "--out", path(&run)]);
    let m = RunManifest::load(&run.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.status, RunStatus::Completed);
    assert_eq!(m.threads, Some(1));
    assert_eq!(m.config["finetune"]["learning_rate"], 2e-5);
    assert!(m.checkpoint_digests.contains_key("finetune.json"));

    let text = ok(&["inspect-checkpoint", path(&run.join("finetune.json"))]);
    assert!(text.contains("finetuned"));
    let merged = dir.path().join("merged.json");
    let json = ok(&[
        "inspect-checkpoint",
        "--json",
        path(&run.join("finetune.json")),
        "--export-merged",
        path(&merged),
    ]);
    let info: serde_json::Value = serde_json::from_str(json.split("merged export").next().unwrap()).unwrap();
    assert_eq!(info["lora"], true);
    let merged_info: serde_json::Value =
        serde_json::from_str(&ok(&["inspect-checkpoint", "--json", path(&merged)])).unwrap();
    assert_eq!(merged_info["lora"], false);
    assert_eq!(merged_info["parameters"]["lora."], 0);

    let again = dir.path().join("again");
    ok(&["--threads", "1", "replay", path(&run.join(MANIFEST_FILE)), "--out", path(&again)]);
    for f in ["pretrain.bin", "finetune.bin", "finetune_report.json", "eval.json"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let ev = dir.path().join("ev");
    let table = ok(&[
        "eval",
        "--checkpoint",
        path(&run.join("finetune.json")),
        "--task-config",
        path(&write_task(dir.path())),
        "--sweep",
        "1x1,2x2,2x2+g",
        "--seeds",
        "0,1",
        "--n",
        "3",
        "--out",
        path(&ev),
    ]);
    assert_eq!(table.lines().count(), 4);
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 3);
    assert_eq!(rows[2]["config"], "2x2+g");
    assert_eq!(rows[0]["result"]["n_samples"], 6);
}

fn write_task(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("task.toml");
    fs::write(&p, "task = \"detail\"\nimage_side = 32\nglyph_side = 8\nn_glyphs = 4\n").unwrap();
    p
}

#[test]
fn eval_sweep_trains_per_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let table = ok(&["eval", "--config", path(&cfg), "--sweep", "1x1,2x2", "--seeds", "1,2"]);
    assert!(table.lines().nth(1).unwrap().starts_with("1x1"));
    assert!(table.lines().nth(2).unwrap().starts_with("2x2"));
}
