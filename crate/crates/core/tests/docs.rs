use matprod::cli::{run, EXIT_CONDITION, EXIT_OK};
use matprod::config::{parse, SpecConfig};

const DOC: &str = include_str!("../../../docs/config.md");

/// Fenced blocks tagged ```json <command>.
fn tagged_examples() -> Vec<(&'static str, String)> {
    let mut out = Vec::new();
    let mut lines = DOC.lines();
    while let Some(line) = lines.next() {
        if let Some(tag) = line.strip_prefix("```json ") {
            let body: Vec<&str> = lines.by_ref().take_while(|l| !l.starts_with("```")).collect();
            out.push((tag.trim(), body.join("\n")));
        }
    }
    out
}

#[test]
fn documented_examples_run() {
    let examples = tagged_examples();
    assert_eq!(examples.len(), 5);
    let dir = tempfile::tempdir().unwrap();
    for (i, (command, body)) in examples.iter().enumerate() {
        if *command == "spec" {
            parse::<SpecConfig>(body).unwrap().build().unwrap();
            continue;
        }
        let path = dir.path().join(format!("example{i}.json"));
        std::fs::write(&path, body).unwrap();
        let mut args = vec!["matprod", command, "--config", path.to_str().unwrap()];
        if *command == "verify" {
            args.extend(["--trials", "200"]);
        }
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(args, &mut out, &mut err);
        assert!(
            code == EXIT_OK || code == EXIT_CONDITION,
            "{command} example: exit {code}, {}",
            String::from_utf8_lossy(&err)
        );
    }
}
