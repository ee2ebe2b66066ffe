//! Run artifacts: the summary document, data files and plot scripts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use gradphi::EstimateReport;
use serde::Serialize;

/// Version of the data file layouts described in `docs/schemas.md`.
pub const SCHEMA_VERSION: u32 = 1;

/// One reported number with its uncertainty.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Estimate {
    pub name: String,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    pub estimate: f64,
    pub stderr: f64,
    pub n: usize,
    pub method: String,
    /// Zero when nothing was truncated.
    pub truncation_bound: f64,
    pub extra: BTreeMap<String, f64>,
}

impl Estimate {
    pub fn from_report(name: &str, l: Option<usize>, r: &EstimateReport) -> Self {
        Estimate {
            name: name.to_string(),
            l,
            estimate: r.estimate,
            stderr: r.stderr,
            n: r.n,
            method: r.method.clone(),
            truncation_bound: r.truncation_bound.unwrap_or(0.0),
            extra: r.extra.clone(),
        }
    }

    /// A deterministic quantity: zero error, sample count 1.
    pub fn exact(name: &str, l: Option<usize>, method: &str, value: f64) -> Self {
        Estimate {
            name: name.to_string(),
            l,
            estimate: value,
            stderr: 0.0,
            n: 1,
            method: method.to_string(),
            truncation_bound: 0.0,
            extra: BTreeMap::new(),
        }
    }
}

/// A pass/fail comparison recorded in the summary.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Complete,
    /// Some outputs are missing or were computed from an interrupted run.
    Partial,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub experiment: String,
    pub status: Status,
    pub config_hash: String,
    pub seed: u64,
    pub workers: usize,
    /// Every named random stream the run drew from.
    pub stream_tree: Vec<String>,
    pub estimates: Vec<Estimate>,
    pub checks: Vec<Check>,
    pub files: Vec<String>,
    pub errors: Vec<String>,
}

/// Collects rows and files during a run; all writes go through here.
pub struct Artifacts {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write_csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path)
            .with_context(|| format!("cannot write {}", path.display()))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.record(name);
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        self.record(name);
        Ok(())
    }

    fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }
}

/// Matplotlib script that renders the figures of an experiment from its CSV files.
pub fn plot_script(experiment: &str) -> String {
    let body = match experiment {
        "oracle" => {
            "df = pd.read_csv('oracle.csv')\n\
             ax.plot(np.log(df['L']), df['variance'], 'o-')\n\
             ax.set_xlabel('ln L'); ax.set_ylabel('Var phi(0)')\n"
        }
        "variance_sweep" => {
            "df = pd.read_csv('variance.csv')\n\
             ax.errorbar(np.log(df['L']), df['estimate'], yerr=df['stderr'], fmt='o-')\n\
             ax.set_xlabel('ln L'); ax.set_ylabel('Var phi(0)')\n"
        }
        "hs_check" => {
            "df = pd.read_csv('hs_check.csv')\n\
             ax.errorbar(df['L'], df['hs'], yerr=df['hs_stderr'], fmt='o', label='heat kernel')\n\
             ax.errorbar(df['L'], df['reference'], yerr=df['reference_stderr'], fmt='s', label='reference')\n\
             ax.set_xlabel('L'); ax.set_ylabel('Var phi(0)'); ax.legend()\n"
        }
        "heatkernel_decay" => {
            "df = pd.read_csv('decay.csv')\n\
             for L, g in df.groupby('L'):\n    ax.errorbar(g['t'], g['mean'], yerr=g['stderr'], fmt='.-', label=f'L={L}')\n\
             ax.set_xscale('log'); ax.set_yscale('log'); ax.set_xlabel('t'); ax.set_ylabel('E P(t,0)'); ax.legend()\n"
        }
        "tails" => {
            "df = pd.read_csv('tails.csv')\n\
             for L, g in df.groupby('L'):\n    g = g[g['survival'] > 0]\n    ax.plot(np.log(g['threshold']), np.log(-np.log(g['survival'])), '.', label=f'L={L}')\n\
             ax.set_xlabel('log K'); ax.set_ylabel('log(-log S(K))'); ax.legend()\n"
        }
        "exit_time" => {
            "df = pd.read_csv('confinement.csv')\n\
             for L, g in df.groupby('L'):\n    ax.errorbar(g['T'], g['probability'], yerr=g['stderr'], fmt='o-', label=f'L={L}')\n\
             ax.set_xscale('log'); ax.set_yscale('log'); ax.set_xlabel('T'); ax.set_ylabel('P[confined on [0,T]]'); ax.legend()\n"
        }
        _ => {
            "df = pd.read_csv('moderation.csv')\n\
             for (L, r), g in df.groupby(['L', 'repeat']):\n    ax.hist(np.log10(g['ratio'][g['ratio'] > 0]), bins=50, histtype='step', label=f'L={L} repeat {r}')\n\
             ax.set_xlabel('log10 ratio'); ax.legend()\n"
        }
    };
    format!(
        "# Renders the figures of this run. Usage: python3 plot.py\n\
         import os\n\
         import numpy as np\n\
         import pandas as pd\n\
         import matplotlib\n\
         matplotlib.use('Agg')\n\
         import matplotlib.pyplot as plt\n\
         \n\
         os.chdir(os.path.dirname(os.path.abspath(__file__)))\n\
         fig, ax = plt.subplots(figsize=(6, 4))\n\
         {body}\
         fig.tight_layout()\n\
         fig.savefig('{experiment}.png', dpi=150)\n"
    )
}
