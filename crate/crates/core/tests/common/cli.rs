use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ood_audit::evaldump::{write_dump, Role};

use super::random_dump;

pub const BIN: &str = env!("CARGO_BIN_EXE_ood-audit");

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "off").output().expect("spawn ood-audit")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

/// Writes id, fit, near, and far dumps under `root` and returns their paths.
pub fn write_fixture_dumps(root: &Path) -> [PathBuf; 4] {
    let specs = [
        ("id", Role::IdTest, 240, 1),
        ("fit", Role::Fit, 300, 2),
        ("near", Role::Ood, 150, 3),
        ("far", Role::Ood, 180, 4),
    ];
    specs.map(|(name, role, n, seed)| {
        let dir = root.join(name);
        let mut dump = random_dump(role, n, 4, 8, seed);
        if name == "far" {
            dump.features.add_scalar_mut(1.5);
            if let Some(h) = &dump.head {
                dump.logits = h.apply(&dump.features).map(|x| x as f32 as f64);
            }
        }
        write_dump(&dump, &dir).unwrap();
        dir
    })
}

/// Every file under `dir` except the timestamp file, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "run_meta.json") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Runs each CLI command twice into fresh output locations and reports the
/// commands whose outputs differ, or a failure message.
pub fn determinism_check(root: &Path) -> Result<usize, String> {
    let [id, fit, near, far] = write_fixture_dumps(root);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let vmr_cfg = root.join("vmr.json");
    fs::write(
        &vmr_cfg,
        r#"{"task": {"n_per_class": 150, "n_test_per_class": 60}, "vmr": {"epochs": 6, "warmup_epochs": 2, "hidden": 16}, "seeds": [0, 1]}"#,
    )
    .unwrap();
    let commands: Vec<(&str, Vec<String>, bool)> = vec![
        (
            "eval",
            vec![
                "eval".into(),
                "--id-test".into(),
                s(&id),
                "--fit".into(),
                s(&fit),
                "--near".into(),
                s(&near),
                "--far".into(),
                s(&far),
                "--scores".into(),
                "msp,energy,maxlogit,entropy,mahalanobis,knn,react,vim".into(),
                "--out".into(),
            ],
            true,
        ),
        (
            "taxonomy",
            vec!["taxonomy".into(), "--id-test".into(), s(&id), "--ood".into(), s(&far), "--out".into()],
            false,
        ),
        (
            "score",
            vec!["score".into(), "--dump".into(), s(&near), "--score".into(), "knn".into(), "--fit".into(), s(&fit), "--out".into()],
            false,
        ),
        (
            "geometry",
            vec!["geometry".into(), "--id-test".into(), s(&id), "--ood".into(), s(&near), s(&far), "--out".into()],
            true,
        ),
        ("vmr-demo", vec!["vmr-demo".into(), "--config".into(), s(&vmr_cfg), "--out".into()], true),
    ];
    let mut checked = 0;
    for (name, args, is_dir) in commands {
        let mut snaps = Vec::new();
        for rep in 0..2 {
            let target = root.join(format!("{name}-{rep}{}", if is_dir { "" } else { ".json" }));
            let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
            let t = s(&target);
            full.push(&t);
            let out = run(&full);
            if code(&out) != 0 {
                return Err(format!("{name} exited {}: {}", code(&out), String::from_utf8_lossy(&out.stderr)));
            }
            snaps.push(if is_dir {
                snapshot(&target)
            } else {
                BTreeMap::from([(PathBuf::from("out.json"), fs::read(&target).unwrap())])
            });
        }
        if snaps[0].is_empty() {
            return Err(format!("{name} wrote nothing"));
        }
        if snaps[0] != snaps[1] {
            let diff: Vec<_> = snaps[0]
                .keys()
                .filter(|k| snaps[0].get(*k) != snaps[1].get(*k))
                .map(|k| k.display().to_string())
                .collect();
            return Err(format!("{name} differs in {}", diff.join(", ")));
        }
        checked += snaps[0].len();
    }
    Ok(checked)
}
