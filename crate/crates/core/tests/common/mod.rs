#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use v2x_dgw::pointcloud::{save_point_cloud, AgentEntry, CloudFormat, SceneManifest};
use v2x_dgw::toy::synthetic_scene;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_v2x-dgw"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Two scene directories with two frames each; the first scene stores
/// binary clouds, the second ASCII.
pub fn write_dataset(root: &Path) {
    for (s, (scene_dir, ext)) in [("scene_a", "bin"), ("scene_b", "txt")].into_iter().enumerate() {
        for f in 0..2 {
            let frame_id = format!("{scene_dir}_{f:06}");
            let scene = synthetic_scene(&frame_id, 3, 400, (s * 10 + f) as u64);
            let dir = root.join(scene_dir);
            fs::create_dir_all(dir.join("clouds")).unwrap();
            let mut agents = Vec::new();
            for a in &scene.agents {
                let rel = PathBuf::from("clouds").join(format!("{f:06}_{}.{ext}", a.agent_id));
                let path = dir.join(&rel);
                save_point_cloud(&a.cloud, &path, CloudFormat::from_path(&path)).unwrap();
                agents.push(AgentEntry {
                    agent_id: a.agent_id.clone(),
                    is_ego: a.is_ego,
                    pose: a.pose,
                    cloud: rel,
                });
            }
            SceneManifest {
                frame_id,
                agents,
                gt_boxes: scene.gt_boxes.clone(),
            }
            .write(&dir.join(format!("{f:06}.json")))
            .unwrap();
        }
    }
}

/// Relative path -> bytes for every file under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(root).unwrap().to_path_buf(), fs::read(e.path()).unwrap()))
        .collect()
}
