mod common;

use std::fs;

use common::{fixture, run, snapshot, stdout, write_dataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use v2x_dgw::cli::{RunManifest, PARTIAL_MARKER, RUN_MANIFEST};

fn p(path: &std::path::Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_weather_clean_copies_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("out"));
    write_dataset(&data);
    let o = run(&["gen-weather", p(&data), p(&out), "--condition", "clean"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let input = snapshot(&data);
    let output = snapshot(&out);
    let clouds: Vec<_> = input.keys().filter(|k| k.starts_with("scene_a/clouds") || k.starts_with("scene_b/clouds")).collect();
    assert_eq!(clouds.len(), 12);
    for rel in clouds {
        assert!(output.get(rel) == Some(&input[rel]), "{} differs", rel.display());
    }
    let manifest: RunManifest = serde_json::from_slice(&output[&std::path::PathBuf::from(RUN_MANIFEST)]).unwrap();
    assert_eq!(manifest.frames.len(), 4);
    assert!(manifest.failures.is_empty());
    for f in &manifest.frames {
        for a in &f.agents {
            assert!(out.join(&a.output).is_file());
            assert_eq!(a.input_points, a.output_points);
        }
    }
}

#[test]
fn gen_weather_schedule_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data);
    let mut snaps = Vec::new();
    for jobs in ["1", "8"] {
        let out = tmp.path().join(format!("out{jobs}"));
        let o = run(&["gen-weather", p(&data), p(&out), "--condition", "snow", "--seed", "5", "--jobs", jobs]);
        assert!(o.status.success());
        snaps.push(snapshot(&out));
    }
    assert_eq!(snaps[0], snaps[1]);
}

#[test]
fn gen_weather_seed_and_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data);
    let go = |name: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec!["gen-weather", p(&data), p(&out)];
        args.extend_from_slice(extra);
        assert!(run(&args).status.success());
        let m: RunManifest = serde_json::from_slice(&fs::read(out.join(RUN_MANIFEST)).unwrap()).unwrap();
        (m, snapshot(&out))
    };
    let (a, sa) = go("a", &["--condition", "fog", "--seed", "1"]);
    let (b, sb) = go("b", &["--condition", "fog", "--seed", "1"]);
    let (c, sc) = go("c", &["--condition", "fog", "--seed", "2"]);
    assert_eq!(sa, sb);
    assert_eq!(a.config_hash, c.config_hash);
    assert_ne!(sa, sc);

    let cfg = tmp.path().join("fog.json");
    fs::write(&cfg, r#"{"condition": "fog", "params": {"visibility": 60.0}}"#).unwrap();
    let (d, _) = go("d", &["--config", p(&cfg), "--seed", "1"]);
    assert_ne!(a.config_hash, d.config_hash);
    assert_eq!(a.config_hash.len(), 64);
    assert!(b.frames.iter().flat_map(|f| &f.agents).all(|r| r.output_points <= r.input_points + 1));
}

#[test]
fn gen_weather_partial_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("out"));
    write_dataset(&data);
    fs::remove_file(data.join("scene_b/clouds/000001_ego.txt")).unwrap();
    let o = run(&["gen-weather", p(&data), p(&out), "--condition", "rain"]);
    assert_eq!(o.status.code(), Some(1));
    let marker = fs::read_to_string(out.join(PARTIAL_MARKER)).unwrap();
    assert!(marker.contains("scene_b/000001.json"), "{marker}");
    let m: RunManifest = serde_json::from_slice(&fs::read(out.join(RUN_MANIFEST)).unwrap()).unwrap();
    assert_eq!((m.frames.len(), m.failures.len()), (3, 1));
    assert!(out.join("scene_a/clouds/000000_ego.bin").is_file());
}

#[test]
fn gen_weather_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["gen-weather", p(tmp.path()), p(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["gen-weather", p(&tmp.path().join("missing")), p(&tmp.path().join("o")), "--condition", "fog"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["gen-weather", p(tmp.path()), p(&tmp.path().join("o")), "--condition", "hail"]);
    assert_eq!(o.status.code(), Some(3));
}

fn preview(args: &[&str]) -> Value {
    let o = run(args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn awa_preview_reports_bounded_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path());
    let cloud = tmp.path().join("scene_a/clouds/000000_ego.bin");
    let cfg = tmp.path().join("awa.json");
    fs::write(&cfg, r#"{"bounds": [20.0, 20.0, 4.0]}"#).unwrap();
    for seed in 0..10 {
        let s = seed.to_string();
        let v = preview(&["awa-preview", p(&cloud), "--config", p(&cfg), "--seed", &s, "--json"]);
        let delta: Vec<f64> = serde_json::from_value(v["delta"].clone()).unwrap();
        let ratios: Vec<f64> = serde_json::from_value(v["extent_ratios"].clone()).unwrap();
        for k in 0..3 {
            assert!((0.5..=0.8).contains(&delta[k]));
            assert!(ratios[k] <= delta[k]);
        }
        assert_eq!(v["source_points"], 400);
    }
}

#[test]
fn awa_preview_identity_and_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path());
    let cloud = tmp.path().join("scene_b/clouds/000000_ego.txt");
    let cfg = tmp.path().join("identity.json");
    fs::write(
        &cfg,
        r#"{"phi_l": 1.0, "phi_u": 1.0, "bounds": [100.0, 100.0, 100.0], "dropout_prob": 0.0, "jitter_sigma": 0.0, "noise_points_frac": 0.0}"#,
    )
    .unwrap();
    let out = tmp.path().join("preview");
    let v = preview(&["awa-preview", p(&cloud), "--config", p(&cfg), "--out-dir", p(&out), "--json"]);
    assert_eq!(v["source_points"], v["reduced_points"]);
    assert_eq!(v["source_points"], v["augmented_points"]);
    assert_eq!(fs::read(out.join("augmented.txt")).unwrap(), fs::read(&cloud).unwrap());

    let o = run(&["awa-preview", p(&tmp.path().join("nope.bin"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn losses_packaged_fixtures() {
    let o = run(&["losses", p(&fixture("aca_group_b1_identical.json"))]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("= 0.693147180559945\n"), "{}", stdout(&o));

    let o = run(&["losses", p(&fixture("identical_flows.json"))]);
    let text = stdout(&o);
    assert!(text.contains("pat_identical [l_pat] = 0\n"), "{text}");
    assert!(text.contains("ffa_identical [l_ffa] = 0\n"), "{text}");
    assert!(text.contains("total_unit_parts [total] = 3.12\n"), "{text}");
}

/// Scalar re-statement of the agent-level contrastive loss.
fn agent_oracle(ids: &[String], s: &[Vec<f64>], a: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let b = ids.len();
    let mut total = 0.0;
    for i in 0..b {
        let denom: f64 = (0..b).map(|j| (dot(&s[i], &s[j]) / tau).exp()).sum::<f64>()
            + (0..b).map(|k| (dot(&a[i], &a[k]) / tau).exp()).sum::<f64>();
        for p in (0..b).filter(|&p| ids[p] == ids[i]) {
            let num = (dot(&s[i], &s[p]) / tau).exp() + (dot(&s[i], &a[p]) / tau).exp() + (dot(&a[i], &a[p]) / tau).exp();
            total += num.ln() - denom.ln();
        }
    }
    -total / b as f64
}

#[test]
fn losses_random_fixture_matches_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let mut cases = Vec::new();
    let mut expected = Vec::new();
    for _ in 0..5 {
        let ids: Vec<String> = (0..4).map(|_| ["a", "b", "c"][rng.gen_range(0..3)].to_string()).collect();
        let s: Vec<_> = (0..4).map(|_| unit(&mut rng)).collect();
        let a: Vec<_> = (0..4).map(|_| unit(&mut rng)).collect();
        let tau = rng.gen_range(0.1..1.0);
        expected.push(agent_oracle(&ids, &s, &a, tau));
        cases.push(serde_json::json!({"kernel": "aca_agent", "ids": ids, "source": s, "augmented": a, "tau": tau}));
    }
    let path = tmp.path().join("random.json");
    fs::write(&path, serde_json::to_string(&serde_json::json!({ "cases": cases })).unwrap()).unwrap();
    let o = run(&["losses", p(&path), "--json"]);
    assert!(o.status.success());
    let rows: Vec<Value> = serde_json::from_slice(&o.stdout).unwrap();
    for (row, want) in rows.iter().zip(&expected) {
        let got = row["value"].as_f64().unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn losses_schema_errors() {
    let tmp = tempfile::tempdir().unwrap();
    for (i, body) in [
        r#"{"kernel": "nope"}"#,
        r#"{"kernel": "l_ffa", "source": [[[1.0]]]}"#,
        r#"{"kernel": "l_ffa", "source": [[[1.0]]], "augmented": [[[1.0]]], "extra": 1}"#,
        r#"{"kernel": "l_pat", "source": [[[1.0, 2.0], [3.0]]], "augmented": [[[1.0, 2.0], [3.0, 4.0]]], "mask": [[1, 1], [1, 1]]}"#,
        "not json",
    ]
    .iter()
    .enumerate()
    {
        let path = tmp.path().join(format!("{i}.json"));
        fs::write(&path, body).unwrap();
        assert_eq!(run(&["losses", p(&path)]).status.code(), Some(1), "{body}");
    }
}

#[test]
fn gradcheck_exit_codes() {
    let o = run(&["gradcheck", "--trials", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 11);
    assert!(text.lines().skip(1).all(|l| l.ends_with("ok")));

    assert_eq!(run(&["gradcheck", "--target", "bogus"]).status.code(), Some(3));
    assert_eq!(run(&["gradcheck", "--eps", "0"]).status.code(), Some(3));
    let o = run(&["gradcheck", "--trials", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).is_empty());

    let o = run(&["gradcheck", "--target", "focal", "--target", "fuse", "--trials", "3", "--json"]);
    let reports: Vec<Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["target"], "focal");
}

#[test]
fn gradcheck_reports_failure_with_coarse_step() {
    // A huge step makes central differences inaccurate on curved kernels.
    let o = run(&["gradcheck", "--target", "focal", "--trials", "5", "--eps", "0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn toyrun_descends() {
    let o = run(&["toyrun", "--json", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["strictly_decreasing"], true);
    assert_eq!(v["objective"].as_array().unwrap().len(), 51);
}

#[test]
fn eval_fixture_and_edge_cases() {
    let dets = fixture("eval_detections.json");
    let gts = fixture("eval_ground_truth.json");
    let o = run(&["eval", p(&dets), p(&gts)]);
    assert_eq!(stdout(&o), "AP@0.50 = 0.8333\nAP@0.70 = 0.8333\n");
    let o = run(&["eval", p(&dets), p(&gts), "--interp", "raw", "--iou", "0.5"]);
    assert_eq!(stdout(&o), "AP@0.50 = 0.8056\n");

    let tmp = tempfile::tempdir().unwrap();
    let perfect = tmp.path().join("perfect.json");
    let mut records: Vec<Value> = serde_json::from_slice(&fs::read(&gts).unwrap()).unwrap();
    for r in &mut records {
        r["score"] = 0.5.into();
    }
    fs::write(&perfect, serde_json::to_string(&records).unwrap()).unwrap();
    let o = run(&["eval", p(&perfect), p(&gts)]);
    assert_eq!(stdout(&o), "AP@0.50 = 1.0000\nAP@0.70 = 1.0000\n");

    let empty = tmp.path().join("empty.json");
    fs::write(&empty, "[]").unwrap();
    let o = run(&["eval", p(&empty), p(&gts), "--json"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["results"][0]["ap"], 0.0);

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"[{"frame_id": "0"}]"#).unwrap();
    assert_eq!(run(&["eval", p(&bad), p(&gts)]).status.code(), Some(1));
    assert_eq!(run(&["eval", p(&dets), p(&gts), "--interp", "nope"]).status.code(), Some(3));
    assert_eq!(run(&["eval", p(&dets), p(&gts), "--iou", "1.5"]).status.code(), Some(3));
}

#[test]
fn help_and_unknown_subcommand() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(3));
    assert_eq!(run(&[]).status.code(), Some(3));
}
