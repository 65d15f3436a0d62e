//! Drives an experiment from a TOML configuration, as the command-line tool
//! does, and lists the files it writes.

use vlasov_mixing::config::RunConfig;
use vlasov_mixing::run::run;

const CONFIG: &str = r#"
experiment = "stationary"
seed = 21

[field]
regime = "magnetic"
g = 10.0
b3 = 2.0

[temperature]
expr = "1.0"

[stationary]
grid_n = 8
samples_per_cell = 1000
mass_samples = 50000
"#;

fn main() {
    let mut cfg = RunConfig::from_toml(CONFIG).expect("valid config");
    let dir = std::env::temp_dir().join("vlasov-mix-example");
    cfg.output_dir = dir.clone();
    println!("config hash {}", cfg.hash());
    match run(&cfg) {
        Ok(out) => {
            println!("{}", out.summary_line);
            for f in &out.files {
                println!("  wrote {}", f.display());
            }
        }
        Err(e) => {
            eprintln!("failed with exit code {}: {e}", e.code);
            std::process::exit(e.code);
        }
    }
}
