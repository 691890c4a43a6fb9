use clap::Parser;

fn main() {
    let cli = gglm_cli::Cli::parse();
    match gglm_cli::run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary is json"));
        }
        Err(err) => {
            let report = serde_json::json!({ "error": format!("{err:#}") });
            eprintln!("{report}");
            std::process::exit(1);
        }
    }
}
