//! Runs the desk reference experiment and prints a summary table.
//!
//! `cargo run --release --example desk_reference [pretrain_epochs finetune_epochs]`

use std::time::Instant;

use maskface::network::{MaskMode, MaskOverride, PatternHead};
use maskface::reference::{evaluate_variant, finetune, pretrain, ReferenceConfig};
use maskface::train::BaselineMode;

fn main() -> maskface::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut cfg = ReferenceConfig::default();
    if let [p, f, ..] = args[..] {
        cfg.pretrain_epochs = p;
        cfg.finetune_epochs = f;
    }
    let t0 = Instant::now();
    let data = cfg.build()?;
    println!("data ready in {:?}", t0.elapsed());

    let pre = pretrain(&cfg, &data)?;
    for l in &pre.history {
        println!("pretrain {:>2} loss {:.4} acc {:.3} lr {}", l.epoch, l.loss, l.train_acc, l.lr);
    }
    let base = evaluate_variant(&pre.network, &data, MaskOverride::Decoded)?;
    println!(
        "baseline      clean {:.4} occ {:.4} rank1 {:.3}  [{:?}]",
        base.clean.accuracy,
        base.occluded.accuracy,
        base.clean.rank1,
        t0.elapsed()
    );

    let variants = [
        ("baseline_aug", BaselineMode::BaselineAug, MaskMode::Conv3d, PatternHead::Classify, 0.0),
        ("baseline_md", BaselineMode::BaselineMd, MaskMode::Conv3d, PatternHead::Classify, 0.0),
        ("from", BaselineMode::From, MaskMode::Conv3d, PatternHead::Classify, 1.0),
    ];
    for (name, mode, mask, head, lambda) in variants {
        let t = finetune(&data, &pre.network, cfg.finetune_config(mode, mask, head, lambda))?;
        for l in &t.history {
            println!(
                "{name} {:>2} loss {:.4} margin {:.4} pat {:.4} acc {:.3} pacc {:?}",
                l.epoch, l.loss, l.margin_loss, l.pattern_loss, l.train_acc, l.pattern_acc
            );
        }
        let r = evaluate_variant(&t.network, &data, MaskOverride::Decoded)?;
        println!(
            "{name:<13} clean {:.4} occ {:.4} rank1 {:.3} opp {:?}  [{:?}]",
            r.clean.accuracy,
            r.occluded.accuracy,
            r.occluded.rank1,
            r.occluded.pattern_accuracy,
            t0.elapsed()
        );
    }
    Ok(())
}
