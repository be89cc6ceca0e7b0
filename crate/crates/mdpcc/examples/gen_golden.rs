//! Regenerates the golden pipeline fixture under `fixtures/golden/`:
//! a four-article corpus, the mock backend tables answering it, the run
//! config, and the expected augmented/audit outputs.
//!
//! The scripted backend answers were chosen by hand — every conflict
//! score below follows from a pinned forced log-probability, e.g. the
//! meat-floss force entry stores ln(0.147) so the conflict score is
//! 1 − 0.147 = 0.853. Rerun with `cargo run -p mdpcc --example
//! gen_golden` after an intentional format change, and review the diff.

use std::fs;
use std::path::{Path, PathBuf};

use mdpcc_core::corpus::SplitName;
use mdpcc_core::extraction::build_prompt;
use mdpcc_core::relations::default_registry;

use mdpcc::config::{self, Overrides};
use mdpcc::harness::run_augment;

struct Article {
    id: &'static str,
    text: &'static str,
    /// 0 = fake, 1 = real.
    label: u8,
    /// Scripted extractions: (relation, subject, object, per-token logprob,
    /// golden object, golden logprobs, forced probability of the extracted
    /// object).
    answers: Vec<Answer>,
}

struct Answer {
    relation: &'static str,
    subject: &'static str,
    object: &'static str,
    generation_logprob: f64,
    golden: &'static str,
    forced_probability: f64,
}

fn articles() -> Vec<(SplitName, Article)> {
    vec![
        (
            SplitName::Train,
            Article {
                id: "golden-001",
                text: "A viral post claims the popular snack meat floss is actually made of \
                       shredded cotton soaked in syrup.",
                label: 0,
                answers: vec![Answer {
                    relation: "MadeOf",
                    subject: "meat floss",
                    object: "cotton",
                    generation_logprob: -0.1,
                    golden: "meatloaf",
                    forced_probability: 0.147, // conflict 0.853 ≥ μ → contrastive branch
                }],
            },
        ),
        (
            SplitName::Train,
            Article {
                id: "golden-002",
                text: "Shoppers say the new smart glasses are sold out everywhere after the \
                       gadget appeared at the bakery downtown.",
                label: 0,
                answers: vec![
                    Answer {
                        relation: "AtLocation",
                        subject: "smart glasses",
                        object: "the bakery",
                        generation_logprob: -0.2,
                        golden: "an electronics store",
                        forced_probability: 0.272, // conflict 0.728 — the argmax
                    },
                    Answer {
                        relation: "UsedFor",
                        subject: "smart glasses",
                        object: "a hammer",
                        generation_logprob: -0.3,
                        golden: "seeing clearly",
                        forced_probability: 0.687, // conflict 0.313 — loses the argmax
                    },
                    Answer {
                        relation: "isA",
                        subject: "smart glasses",
                        object: "a scam",
                        // Scores 1.0 on the likelihood filter, above the 0.8
                        // threshold: parsed but dropped, never reasoned about.
                        generation_logprob: -1.0,
                        golden: "",
                        forced_probability: f64::NAN,
                    },
                ],
            },
        ),
        (
            SplitName::Val,
            Article {
                id: "golden-003",
                text: "The market now stocks fresh lotus root, and vendors recommend it for \
                       hearty soups.",
                label: 1,
                answers: vec![Answer {
                    relation: "UsedFor",
                    subject: "lotus root",
                    object: "cooking",
                    generation_logprob: -0.15,
                    golden: "cooking",
                    forced_probability: 0.665, // conflict 0.335 < μ → additive branch
                }],
            },
        ),
        (
            SplitName::Test,
            Article {
                id: "golden-004",
                text: "Sources insist the moon landing footage was shot in a basement studio, \
                       without offering any evidence.",
                label: 0,
                // No scripted extractions: every relation gets the mock's
                // unparseable fallback, so the expression stays empty.
                answers: vec![],
            },
        ),
    ]
}

const K: usize = 5;

fn write(path: &Path, content: &str) {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).unwrap();
    }
    fs::write(path, content).unwrap();
}

fn main() {
    // Pin record timestamps so the expected files are reproducible.
    std::env::set_var("SOURCE_DATE_EPOCH", "0");

    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden");
    let registry = default_registry();
    let articles = articles();

    // Corpus: one JSONL file per split.
    for split in SplitName::ALL {
        let lines: String = articles
            .iter()
            .filter(|(s, _)| *s == split)
            .map(|(_, a)| {
                serde_json::json!({"id": a.id, "text": a.text, "label": a.label}).to_string() + "\n"
            })
            .collect();
        write(&root.join(format!("corpus/{}.jsonl", split.as_str())), &lines);
    }

    // Mock backend tables: scripted generations for the answers above;
    // every other prompt falls through to the mock's default fallback.
    let mut mock_lines = Vec::new();
    for (_, article) in &articles {
        for answer in &article.answers {
            let spec = registry.get(answer.relation).expect("relation exists");
            let prompt = build_prompt(spec, registry.examples(answer.relation), article.text, K)
                .expect("registry has enough examples");
            let generation = format!(
                "{} is {} and {} is {}.",
                spec.slot_labels[0], answer.subject, spec.slot_labels[1], answer.object
            );
            let tokens = generation.split_whitespace().count();
            mock_lines.push(
                serde_json::json!({
                    "kind": "generate",
                    "prompt": prompt,
                    "text": generation,
                    "logprobs": vec![answer.generation_logprob; tokens],
                })
                .to_string(),
            );
            if answer.golden.is_empty() {
                continue; // filtered out before any reasoner call
            }
            let golden_tokens = answer.golden.split_whitespace().count();
            mock_lines.push(
                serde_json::json!({
                    "kind": "object",
                    "subject": answer.subject,
                    "relation": answer.relation,
                    "text": answer.golden,
                    "logprobs": vec![-0.1; golden_tokens],
                })
                .to_string(),
            );
            // One logprob per target token, all equal, so the mean — and
            // therefore the conflict score — is exactly ln(p).
            let target_tokens = answer.object.split_whitespace().count();
            mock_lines.push(
                serde_json::json!({
                    "kind": "force",
                    "subject": answer.subject,
                    "relation": answer.relation,
                    "target": answer.object,
                    "logprobs": vec![answer.forced_probability.ln(); target_tokens],
                })
                .to_string(),
            );
        }
    }
    write(&root.join("mock_backend.jsonl"), &(mock_lines.join("\n") + "\n"));

    write(
        &root.join("config.toml"),
        &format!(
            "corpus_dir = \"corpus\"\n\
             \n\
             [extraction]\n\
             k = {K}\n\
             epsilon = 0.8\n\
             \n\
             [expression]\n\
             mu = 0.6\n\
             \n\
             [backends]\n\
             extractor = \"mock:mock_backend.jsonl\"\n\
             reasoner = \"mock:mock_backend.jsonl\"\n"
        ),
    );

    // Run the real pipeline into a scratch directory and freeze its
    // outputs as the expected files.
    let scratch = tempfile::tempdir().unwrap();
    let config = config::resolve(Overrides {
        config: Some(root.join("config.toml")),
        out: Some(scratch.path().join("out")),
        cache_dir: Some(scratch.path().join("cache")),
        workers: Some(1),
        ..Overrides::default()
    })
    .unwrap();
    let output = run_augment(&config).unwrap();
    assert!(output.rejects.is_empty(), "golden corpus must be clean");

    for split in SplitName::ALL {
        for path in [config.augmented_path(split), config.audit_path(split)] {
            let name = path.file_name().unwrap();
            fs::create_dir_all(root.join("expected")).unwrap();
            fs::copy(&path, root.join("expected").join(name)).unwrap();
        }
    }

    for split in &output.summary.splits {
        println!(
            "{}: {} articles, {} conflicted, {} empty, mean conflict {:?}, {} filtered",
            split.split.as_str(),
            split.articles,
            split.conflicted,
            split.empty_expressions,
            split.mean_conflict,
            split.filter_drops
        );
    }
    let train = fs::read_to_string(root.join("expected/augmented-train.jsonl")).unwrap();
    let meat_floss: serde_json::Value =
        serde_json::from_str(train.lines().next().unwrap()).unwrap();
    println!("meat floss expression: {}", meat_floss["expression"]["text"]);
    println!("golden fixture written to {}", root.display());
}
