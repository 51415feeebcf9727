//! The `gen`, `run` and `report` subcommands driven in-process, as the
//! `hyciss` binary would run them.

use hyciss::cli::main_with_args;

fn main() {
    let root = std::env::temp_dir().join("hyciss-cli-example");
    let data = root.join("data");
    let runs = root.join("runs");
    let data_s = data.to_string_lossy().into_owned();
    let code = main_with_args(["hyciss", "gen", "--n", "300", "--val", "60", "--seed", "0", "--out", &data_s]);
    assert_eq!(code, 0);

    for (name, flags) in [("full", vec![]), ("baseline", vec!["--no-dice", "--uniform-pl", "--curvature", "2"])] {
        let cfg = root.join(format!("{name}.json"));
        let body = serde_json::json!({
            "name": name,
            "schedule": "disjoint-8-1",
            "dataset": data,
            "output_dir": runs.join(name),
            "steps": 2,
            "train": {"epochs_base": 1, "epochs_incremental": 1, "crop": 24},
            "backbone": {"channels": [3, 8, 8], "kernel": 3, "activation": "tanh"},
            "train_per_step": 60,
            "val_per_step": 20
        });
        std::fs::write(&cfg, body.to_string()).expect("write config");
        let cfg_s = cfg.to_string_lossy().into_owned();
        let mut args = vec!["hyciss", "run", cfg_s.as_str()];
        args.extend(flags);
        assert_eq!(main_with_args(args), 0);
    }
    let runs_s = runs.to_string_lossy().into_owned();
    assert_eq!(main_with_args(["hyciss", "report", &runs_s]), 0);
    // a directory without runs exits with the missing-run code
    println!("report on an empty dir exits with {}", main_with_args(["hyciss", "report", &data_s]));
}
