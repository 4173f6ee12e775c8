//! Temporary diagnostic — not part of the suite.

use reidkit::fields::downsample_labels_majority;
use reidkit::synthgen::{generate_dataset, CorpusConfig};

#[test]
#[ignore]
fn parse_accuracy_of_bench_model() {
    let ckpt = std::env::var("DIAG_CKPT").unwrap_or("/tmp/bench/lr128/model.ckpt".into());
    let (model, _) = reidkit::net::checkpoint::load(std::path::Path::new(&ckpt)).unwrap();
    let ds = generate_dataset(&CorpusConfig::default(), 1).unwrap();
    let (fh, fw) = model.cfg.feature_hw();
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut confusion = vec![vec![0usize; 6]; 6];
    for s in ds.query.iter().chain(ds.gallery.iter()) {
        let out = model.infer(&s.image, 0.4, None).unwrap();
        let gt = downsample_labels_majority(&s.parsing_gt, fh, fw);
        for y in 0..fh {
            for x in 0..fw {
                let mut best = 0usize;
                for c in 1..out.m.dim().2 {
                    if out.m[(y, x, c)] > out.m[(y, x, best)] {
                        best = c;
                    }
                }
                if best as u8 == gt.labels[(y, x)] {
                    hits += 1;
                }
                confusion[gt.labels[(y, x)] as usize][best] += 1;
                total += 1;
            }
        }
    }
    println!(
        "parse accuracy {:.4} over {} pixels",
        hits as f64 / total as f64,
        total
    );
    for (g, row) in confusion.iter().enumerate() {
        let s: usize = row.iter().sum();
        if s == 0 {
            continue;
        }
        let frac: Vec<String> = row
            .iter()
            .map(|&c| format!("{:.2}", c as f64 / s as f64))
            .collect();
        println!("gt {g} ({s} px): pred {}", frac.join(" "));
    }
}
