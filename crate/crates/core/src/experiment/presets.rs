//! Ready-made experiment configurations over the synthetic tasks.

use super::config::{CellConfig, EvalMode, ExperimentConfig, TaskConfig};
use crate::conditioning::Metric;
use crate::error::{Error, Result};
use crate::mixture::{Composition, Strategy};
use crate::synth::SynthKind;

pub const PRESETS: [&str; 11] = [
    "table1_conditioning",
    "fig2_depth_grid",
    "fig3_mixing",
    "table2_aux_ocr",
    "fig6_class_tokens",
    "fig5_languages",
    "fig4_regularization",
    "fig7_prompt_confusion",
    "fig8_decoding",
    "fig9_compression",
    "frozen_vs_finetune",
];

fn base(name: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        name: name.into(),
        output: format!("runs/{name}").into(),
        ..ExperimentConfig::default()
    };
    c.train.learning_rate = 6e-3;
    c.train.steps = Some(1500);
    c
}

fn task(name: &str, kind: SynthKind, train: usize, eval: usize, seed: u64) -> TaskConfig {
    TaskConfig::new(name, kind, train, eval, seed)
}

fn cider(mut t: TaskConfig) -> TaskConfig {
    t.metric = Metric::Cider;
    t
}

/// Majority caption task and minority classification task over one image pool.
fn table1() -> ExperimentConfig {
    let mut c = base("table1_conditioning");
    c.tasks = vec![
        cider(task("cap", SynthKind::CaptionLayout, 5600, 300, 1)),
        task("cls", SynthKind::ClassifyDominantGlyph, 1000, 400, 1),
    ];
    c.mixture_tasks = vec!["cap".into(), "cls".into()];
    c.cells = vec![
        CellConfig::new("single_cap", &["cap"]),
        CellConfig::new("single_cls", &["cls"]),
        CellConfig::new("task_prompt", &[]),
        CellConfig::new("category_prompt", &[]).with("conditioning.mode", "category_prompt"),
        CellConfig::new("unconditioned", &[]).with("conditioning.mode", "unconditioned"),
    ];
    c
}

pub const DEPTH_GRID: [usize; 3] = [1, 2, 4];
pub const DEPTH_GRID_TASKS: [&str; 4] = ["ocr", "cls", "cap", "qa"];

/// Depth × number of tasks, adding tasks in a fixed order.
fn fig2() -> ExperimentConfig {
    let mut c = base("fig2_depth_grid");
    c.decoder.model_dim = 16;
    c.decoder.mlp_dim = 32;
    c.train.steps = None;
    c.train.epochs = 20.0;
    c.tasks = vec![
        task("ocr", SynthKind::OcrReadSequence, 3000, 400, 3),
        task("cls", SynthKind::ClassifyDominantGlyph, 1000, 200, 1),
        task("cap", SynthKind::CaptionLayout, 1000, 200, 2),
        task("qa", SynthKind::QaCountAttribute, 1000, 200, 4),
    ];
    for depth in DEPTH_GRID {
        for n in 1..=DEPTH_GRID_TASKS.len() {
            c.cells.push(
                CellConfig::new(&format!("d{depth}_t{n}"), &DEPTH_GRID_TASKS[..n])
                    .with("decoder.depth", depth)
                    .eval(&["ocr"]),
            );
        }
    }
    c
}

/// The four sampling strategies plus homogeneous batches.
fn fig3() -> ExperimentConfig {
    let mut c = base("fig3_mixing");
    let mut qa = task("qa", SynthKind::QaCountAttribute, 1000, 200, 7);
    qa.pairs_per_image = 4.8;
    qa.group = Some("pool7".into());
    let mut cap = cider(task("cap", SynthKind::CaptionLayout, 1000, 200, 7));
    cap.group = Some("pool7".into());
    c.tasks = vec![
        task("cls", SynthKind::ClassifyDominantGlyph, 4000, 200, 1),
        cap,
        qa,
        task("ocr", SynthKind::OcrReadSequence, 1000, 200, 3),
    ];
    c.mixture_tasks = c.tasks.iter().map(|t| t.name.clone()).collect();
    for s in Strategy::ALL {
        c.cells
            .push(CellConfig::new(&s.to_string(), &[]).with("mixture.strategy", s));
    }
    c.cells.push(
        CellConfig::new("concat_images_homogeneous", &[])
            .with("mixture.strategy", Strategy::ConcatImages)
            .with("mixture.composition", Composition::Homogeneous),
    );
    c
}

/// A small OCR task with each auxiliary OCR-like task.
fn table2() -> ExperimentConfig {
    let mut c = base("table2_aux_ocr");
    c.tasks = vec![
        task("ocr", SynthKind::OcrReadSequence, 800, 400, 3),
        task("ocr_concat", SynthKind::AuxOcrConcat, 3000, 100, 11),
        task("ocr_random", SynthKind::AuxOcrRandom, 3000, 100, 12),
        task("alt_text", SynthKind::AuxAltText, 3000, 100, 13),
    ];
    c.cells = vec![
        CellConfig::new("main_only", &["ocr"]),
        CellConfig::new("with_concat", &["ocr", "ocr_concat"]).eval(&["ocr"]),
        CellConfig::new("with_random", &["ocr", "ocr_random"]).eval(&["ocr"]),
        CellConfig::new("with_alt_text", &["ocr", "alt_text"]).eval(&["ocr"]),
        CellConfig::new("with_all", &["ocr", "ocr_concat", "ocr_random", "alt_text"])
            .eval(&["ocr"]),
    ];
    c
}

/// Class labels as words versus one dedicated token per class.
fn fig6() -> ExperimentConfig {
    let mut c = base("fig6_class_tokens");
    c.tasks = vec![
        task("cls", SynthKind::ClassifyDominantGlyph, 600, 500, 1),
        cider(task("cap", SynthKind::CaptionLayout, 1200, 100, 2)),
    ];
    c.mixture_tasks = vec!["cls".into(), "cap".into()];
    c.cells = vec![
        CellConfig::new("words", &[]).eval(&["cls"]),
        CellConfig::new("class_tokens", &[])
            .with("task.cls.class_tokens", true)
            .eval(&["cls"]),
    ];
    c
}

/// Caption languages as separate tasks with partial vocabulary overlap.
fn fig5() -> ExperimentConfig {
    let mut c = base("fig5_languages");
    let lang = |name: &str, code: &str, overlap: f64, seed: u64| {
        let mut t = cider(task(name, SynthKind::CaptionLayout, 1500, 200, seed));
        t.language = code.into();
        t.overlap = overlap;
        t
    };
    c.tasks = vec![
        lang("cap_en", "en", 1.0, 2),
        lang("cap_xa", "xa", 0.5, 21),
        lang("cap_xb", "xb", 0.0, 22),
    ];
    c.mixture_tasks = c.tasks.iter().map(|t| t.name.clone()).collect();
    for t in &c.tasks {
        c.cells
            .push(CellConfig::new(&format!("single_{}", t.name), &[&t.name]));
    }
    c.cells.push(CellConfig::new("all_languages", &[]));
    c
}

pub const REG_DROPOUT: [f64; 3] = [0.0, 0.1, 0.5];
pub const REG_WEIGHT_DECAY: [f64; 3] = [0.0, 1e-4, 1e-2];

/// Dropout × weight decay for the caption task alone and within a mixture.
fn fig4() -> ExperimentConfig {
    let mut c = base("fig4_regularization");
    c.train.steps = Some(2250);
    c.tasks = vec![
        cider(task("cap", SynthKind::CaptionLayout, 300, 300, 2)),
        task("cls", SynthKind::ClassifyDominantGlyph, 1500, 100, 1),
        task("alt_text", SynthKind::AuxAltText, 1500, 100, 5),
    ];
    for (setting, tasks) in [
        ("single", &["cap"][..]),
        ("multi", &["cap", "cls", "alt_text"][..]),
    ] {
        for d in REG_DROPOUT {
            for wd in REG_WEIGHT_DECAY {
                c.cells.push(
                    CellConfig::new(&format!("{setting}_do{d}_wd{wd}"), tasks)
                        .with("train.dropout", d)
                        .with("train.weight_decay", wd)
                        .eval(&["cap"]),
                );
            }
        }
    }
    c
}

/// Cross-prompting: each task's prompt on each task's images.
fn fig7() -> ExperimentConfig {
    let mut c = base("fig7_prompt_confusion");
    c.eval_mode = EvalMode::CrossPrompt;
    c.tasks = vec![
        task("cls", SynthKind::ClassifyDominantGlyph, 1500, 100, 1),
        cider(task("cap", SynthKind::CaptionLayout, 1500, 100, 2)),
        task("ocr", SynthKind::OcrReadSequence, 1500, 100, 3),
        task("qa", SynthKind::QaCountAttribute, 1500, 100, 4),
    ];
    c.mixture_tasks = c.tasks.iter().map(|t| t.name.clone()).collect();
    c.cells = vec![
        CellConfig::new("task_prompt", &[]),
        CellConfig::new("task_position_embeddings", &[])
            .with("conditioning.mode", "task_position_embeddings"),
    ];
    c
}

/// Decoding strategies on one shared model per seed.
fn fig8() -> ExperimentConfig {
    let mut c = base("fig8_decoding");
    c.time_decoding = true;
    c.tasks = vec![
        task("cls", SynthKind::ClassifyDominantGlyph, 1500, 200, 1),
        cider(task("cap", SynthKind::CaptionLayout, 1500, 200, 2)),
        task("ocr", SynthKind::OcrReadSequence, 1500, 200, 3),
    ];
    c.mixture_tasks = c.tasks.iter().map(|t| t.name.clone()).collect();
    let cell = |name: &str| CellConfig::new(name, &[]);
    c.cells = vec![
        cell("greedy").with("decode.strategy", "greedy"),
        cell("beam2")
            .with("decode.strategy", "beam")
            .with("decode.k", 2),
        cell("beam4")
            .with("decode.strategy", "beam")
            .with("decode.k", 4),
        cell("beam8")
            .with("decode.strategy", "beam")
            .with("decode.k", 8),
        cell("beam4_gumbel")
            .with("decode.strategy", "beam")
            .with("decode.k", 4)
            .with("decode.gumbel_scale", 0.5),
        cell("temperature")
            .with("decode.strategy", "temperature")
            .with("decode.temperature", 0.7),
        cell("top_k")
            .with("decode.strategy", "top_k")
            .with("decode.k", 4),
        cell("score_classes")
            .with("task.cls.decode.strategy", "score_classes")
            .eval(&["cls"]),
    ];
    c
}

pub const COMPRESSIONS: [&str; 4] = ["none", "bottleneck:8", "bottleneck:32", "map_pool"];

/// Stored-token compression, each task trained on its own.
fn fig9() -> ExperimentConfig {
    let mut c = base("fig9_compression");
    c.decoder.encoder_dim = 128;
    c.train.learning_rate = 3e-3;
    c.train.steps = Some(2000);
    c.tasks = vec![
        task("ocr", SynthKind::OcrReadSequence, 4000, 400, 3),
        task("cls", SynthKind::ClassifyDominantGlyph, 2000, 400, 1),
    ];
    for comp in COMPRESSIONS {
        let label = comp.replace(':', "");
        for t in ["ocr", "cls"] {
            c.cells.push(
                CellConfig::new(&format!("{label}_{t}"), &[t]).with("decoder.compression", comp),
            );
        }
    }
    c
}

/// Frozen toy encoder versus training it with a reduced learning rate.
fn frozen_vs_finetune() -> ExperimentConfig {
    let mut c = base("frozen_vs_finetune");
    c.tasks = vec![
        task("cls", SynthKind::ClassifyDominantGlyph, 1500, 200, 1),
        task("ocr", SynthKind::OcrReadSequence, 1500, 200, 3),
    ];
    c.mixture_tasks = vec!["cls".into(), "ocr".into()];
    c.cells = vec![
        CellConfig::new("frozen", &[]),
        CellConfig::new("finetune", &[]).with("train.train_encoder", true),
    ];
    c
}

/// Preset `name`; unknown names list the valid ones.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let c = match name {
        "table1_conditioning" => table1(),
        "fig2_depth_grid" => fig2(),
        "fig3_mixing" => fig3(),
        "table2_aux_ocr" => table2(),
        "fig6_class_tokens" => fig6(),
        "fig5_languages" => fig5(),
        "fig4_regularization" => fig4(),
        "fig7_prompt_confusion" => fig7(),
        "fig8_decoding" => fig8(),
        "fig9_compression" => fig9(),
        "frozen_vs_finetune" => frozen_vs_finetune(),
        _ => {
            return Err(Error::config(format!(
                "unknown preset {name:?}; valid presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    c.validate()?;
    Ok(c)
}
