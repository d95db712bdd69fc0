//! Audits that ground truth of unlabeled clients is reachable only from the
//! evaluation code.

use std::fs;
use std::path::{Path, PathBuf};

fn sources(dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            sources(&path, out);
        } else if path.extension().is_some_and(|e| e == "rs") {
            out.push(path);
        }
    }
}

fn non_test_code(text: &str) -> &str {
    text.split("#[cfg(test)]").next().unwrap()
}

#[test]
fn hidden_targets_are_revealed_only_for_evaluation() {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    let mut files = Vec::new();
    sources(&src, &mut files);
    let mut callers = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f).unwrap();
        let code = non_test_code(&text);
        let uses = code.matches("reveal_for_evaluation").count();
        let name = f.strip_prefix(&src).unwrap().to_string_lossy().into_owned();
        if name == "data.rs" {
            assert_eq!(uses, 1, "data.rs should only define the accessor");
            assert!(code.contains("pub(crate) fn reveal_for_evaluation"));
        } else if uses > 0 {
            callers.push(name);
        }
    }
    assert_eq!(callers, vec!["metrics.rs".to_string()]);
}

#[test]
fn training_code_never_touches_hidden_targets() {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    for f in ["training.rs", "relation.rs", "federation.rs"] {
        let text = fs::read_to_string(src.join(f)).unwrap();
        let code = non_test_code(&text);
        assert!(!code.contains("hidden_targets"), "{f} reads hidden targets");
        assert!(!code.contains("reveal_for_evaluation"), "{f} reveals targets");
    }
}
