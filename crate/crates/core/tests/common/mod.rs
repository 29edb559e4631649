#![allow(dead_code)]

pub mod oracles;

use std::path::PathBuf;

use iccl_core::corpus::{self, Demonstration};
use iccl_core::promptkit::{self, TemplateFamily, TemplateKind};
use iccl_core::TaskSpec;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn task(name: &str) -> TaskSpec {
    TaskSpec::load(&fixture(&format!("tasks/{name}.json"))).expect("task fixture")
}

pub const SYSTEM: &str = "You are a helpful assistant.";

pub const FAMILIES: [(&str, TemplateKind); 3] = [
    ("mixtral", TemplateKind::MixtralInst),
    ("llama2", TemplateKind::Llama2Chat),
    ("qwen", TemplateKind::QwenChatml),
];

pub const TASKS: [&str; 3] = ["scicite", "scinli", "scierc"];

/// Renders the golden scenario: the first two records as demonstrations,
/// the third as the test input.
pub fn render_golden(family: TemplateKind, task_name: &str) -> String {
    let spec = task(task_name);
    let recs: Vec<Demonstration> =
        corpus::load_pool(&fixture(&format!("golden_inputs/{task_name}.jsonl")), &spec).expect("golden inputs");
    let fam = TemplateFamily::new(family, Some(SYSTEM.into()));
    promptkit::render(&fam, &spec, &[&recs[0], &recs[1]], recs[2].input(), None)
        .expect("render")
        .text
}

pub fn golden_text(family: &str, task_name: &str) -> String {
    std::fs::read_to_string(fixture(&format!("golden/{family}_{task_name}.txt"))).expect("golden file")
}
