//! Per-layer, per-component ranges of the TCA parameters in a model file.
//!
//! ```sh
//! cargo run --release --example tca_stats -- runs/dpbn_tca/model.dpbn
//! ```

use dpbn::model_file::{self, Model};

fn main() {
    let Some(path) = std::env::args().nth(1) else {
        eprintln!("usage: tca_stats <model.dpbn>");
        std::process::exit(2);
    };
    let net = match model_file::load(path.as_ref()) {
        Ok(Model::Dpbn(net)) => net,
        Ok(Model::Aec(_)) => {
            eprintln!("{path}: AEC models have no TCAs");
            std::process::exit(1);
        }
        Err(e) => {
            eprintln!("{path}: {e}");
            std::process::exit(1);
        }
    };
    let range = |v: &mut dyn Iterator<Item = f64>| {
        v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
    };
    for (l, layer) in net.layers().iter().enumerate() {
        let units = layer.tca.units();
        for c in 0..layer.tca.components() {
            let a = range(&mut units.iter().map(|u| u.a()[c]));
            let w = range(&mut units.iter().map(|u| u.w()[c]));
            let b = range(&mut units.iter().map(|u| u.b()[c]));
            println!(
                "layer {l} component {c}: a [{:.3}, {:.3}]  w [{:.3}, {:.3}]  b [{:.3}, {:.3}]",
                a.0, a.1, w.0, w.1, b.0, b.1
            );
        }
    }
}
