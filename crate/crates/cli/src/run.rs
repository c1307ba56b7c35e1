//! Run directories: `<root>/<command>-<hash>/` holding the inputs, a manifest,
//! the results and a plotting stub.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use memctrl_core::ProblemSpec;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const RUN_ROOT_VAR: &str = "MEMCTRL_RUN_ROOT";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Hex digest of the canonical JSON of `key`. Object keys are sorted by
/// `serde_json`, so equal inputs hash equally.
pub fn digest(key: &Value) -> String {
    let bytes = serde_json::to_vec(key).expect("JSON values serialize");
    hex::encode(Sha256::digest(bytes))
}

pub struct RunDir {
    path: PathBuf,
    command: &'static str,
    replay: Vec<String>,
    key: Value,
    files: Vec<String>,
    started: Instant,
}

impl RunDir {
    /// `replay` is the argument list that reproduces the run from inside the
    /// directory; together with `inputs` it decides the directory name.
    pub fn create(command: &'static str, replay: Vec<String>, inputs: Value, out: Option<&Path>) -> Result<Self> {
        let key = json!({ "command": command, "replay": replay, "inputs": inputs });
        let path = match out {
            Some(p) => p.to_path_buf(),
            None => run_root().join(format!("{command}-{}", &digest(&key)[..12])),
        };
        std::fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        log::info!("run directory {}", path.display());
        Ok(Self {
            path,
            command,
            replay,
            key,
            files: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let file = self.path.join(name);
        std::fs::write(&file, text).with_context(|| format!("writing {}", file.display()))?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_owned());
        }
        Ok(())
    }

    pub fn write_problem(&mut self, problem: &ProblemSpec) -> Result<()> {
        let text = serde_json::to_string_pretty(&problem.to_file())?;
        self.write("problem.json", &(text + "\n"))
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    /// Writes `result.json`, the plotting stub and the manifest.
    pub fn finish(mut self, argv: &[String], seed: Option<u64>, result: &impl Serialize, plots: &[Plot]) -> Result<PathBuf> {
        self.write_json("result.json", result)?;
        if !plots.is_empty() {
            self.write("plot.py", &plot_script(plots))?;
        }
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "argv": argv,
            "replay": self.replay,
            "seed": seed,
            "inputs": self.key["inputs"],
            "files": self.files,
            "wall_time_s": self.started.elapsed().as_secs_f64(),
        });
        self.write_json("manifest.json", &manifest)?;
        Ok(self.path)
    }
}

/// One figure of the plotting stub: every column of `csv` after the first
/// against the first.
pub struct Plot {
    pub csv: &'static str,
    pub title: &'static str,
    pub log_y: bool,
}

fn plot_script(plots: &[Plot]) -> String {
    let mut s = String::from(
        "\"\"\"Plots the CSV outputs of this run. Edit freely.\"\"\"\n\
         import csv\nimport matplotlib.pyplot as plt\n\n\n\
         def columns(path):\n    with open(path) as f:\n        rows = [r for r in csv.reader(f) if r and not r[0].startswith(\"#\")]\n\
         \x20   head, body = rows[0], rows[1:]\n\
         \x20   return head, [[float(v) for v in col] for col in zip(*body)]\n\n\n",
    );
    for p in plots {
        s.push_str(&format!(
            "head, cols = columns(\"{csv}\")\nfig, ax = plt.subplots()\nfor name, col in zip(head[1:], cols[1:]):\n    ax.plot(cols[0], col, label=name)\n\
             ax.set_xlabel(head[0])\nax.set_title(\"{title}\")\n{log}ax.legend()\nfig.savefig(\"{stem}.png\", dpi=150)\n\n",
            csv = p.csv,
            title = p.title,
            log = if p.log_y { "ax.set_yscale(\"log\")\n" } else { "" },
            stem = p.csv.trim_end_matches(".csv"),
        ));
    }
    s
}
