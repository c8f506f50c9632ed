//! Print a preset experiment config as TOML: `cargo run --example dump_config -- dominant`

use mmfusion::config::ExperimentConfig;

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "dominant".into());
    let cfg = match name.as_str() {
        "dominant" => ExperimentConfig::dominant_preset(0),
        "balanced_xor" => ExperimentConfig::balanced_xor_preset(0),
        other => {
            eprintln!("unknown preset {other}");
            std::process::exit(1);
        }
    };
    print!("{}", cfg.to_toml());
}
