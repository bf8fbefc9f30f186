//! Writes the bundled scripted scenarios as pipeline config files.
//!
//! ```text
//! cargo run -p promptor --example dump_scenarios -- configs
//! ```

use promptor::scenarios;

fn main() -> std::io::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "configs".into());
    std::fs::create_dir_all(&dir)?;
    let named = [
        ("happy.json", scenarios::happy_path()),
        ("refine-then-augment.json", scenarios::refine_then_augment()),
        ("permanent-failure.json", scenarios::permanent_failure()),
        ("coarse-subtask.json", scenarios::coarse_subtask()),
        ("flipping-verdict.json", scenarios::flipping_verdict()),
    ];
    for (name, cfg) in named {
        let path = std::path::Path::new(&dir).join(name);
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n")?;
        println!("{}", path.display());
    }
    Ok(())
}
