//! `countlab` command-line front end.

mod cmd;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "countlab", version, about = "Synthetic counting corpora, a tiny VLM and circuit analyses")]
pub struct Cli {
    /// JSON run-config; flags given on the command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $COUNTLAB_OUT, then ./countlab_out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset split or a counterfactual pair corpus.
    Gen(GenArgs),
    /// Train (or fine-tune) a model, optionally with the focus loss.
    Train(TrainArgs),
    /// Evaluate checkpoints on a counting split.
    Eval(EvalArgs),
    /// Interpretability analyses.
    #[command(subcommand)]
    Interp(InterpCmd),
    /// Evaluate training-free head interventions.
    Intervene(InterveneArgs),
    /// Render heatmaps and curves from JSON reports.
    Report(ReportArgs),
}

#[derive(Subcommand, Debug)]
pub enum InterpCmd {
    /// Logit-lens rank of the answer token per layer.
    Lens(LensArgs),
    /// Train translators and score every head.
    Headlens(HeadlensArgs),
    /// Layer-wise activation patching over token groups.
    VapLayer(VapLayerArgs),
    /// Head-wise activation patching importance.
    VapHead(VapHeadArgs),
    /// Mean-ablation head sets per task.
    Ablate(AblateArgs),
    /// Jaccard similarity of head sets across tasks.
    Jaccard(JaccardArgs),
    /// Binding, numerosity or attention-lens probes.
    Probe(ProbeArgs),
    /// Yes/no verification band per scene.
    Yesband(YesbandArgs),
}

macro_rules! opt_args {
    ($(#[$m:meta])* $name:ident { $($(#[$fm:meta])* $f:ident : $t:ty),* $(,)? }) => {
        $(#[$m])*
        #[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case", deny_unknown_fields)]
        pub struct $name {
            $(
                $(#[$fm])*
                #[serde(default, skip_serializing_if = "Option::is_none")]
                pub $f: Option<$t>,
            )*
        }
    };
}

opt_args!(GenArgs {
    /// syndot, synpoly or colorshape
    #[arg(long)] kind: String,
    /// Count range such as 1-5
    #[arg(long)] counts: String,
    #[arg(long)] per_count: usize,
    #[arg(long)] canvas: usize,
    #[arg(long)] patch: usize,
    #[arg(long)] radius: usize,
    /// Emit this many counterfactual pairs instead of a split
    #[arg(long)] pairs: usize,
    /// count-only or multitask
    #[arg(long)] mix: String,
});

opt_args!(TrainArgs {
    /// Dataset directory written by `gen`
    #[arg(long)] data: PathBuf,
    /// toy or micro
    #[arg(long)] preset: String,
    /// Start from this checkpoint instead of a fresh init
    #[arg(long)] init: PathBuf,
    #[arg(long)] epochs: usize,
    #[arg(long)] lr: f64,
    #[arg(long)] batch_size: usize,
    #[arg(long)] weight_decay: f64,
    #[arg(long)] warmup_frac: f64,
    /// Attention layers (0-based) regularised by the focus loss
    #[arg(long, value_delimiter = ',')] focus_layers: Vec<usize>,
    #[arg(long)] lambda: f64,
    #[arg(long)] sigma: f64,
    /// after-image or image-tokens
    #[arg(long)] query_set: String,
});

opt_args!(EvalArgs {
    /// One checkpoint per seed
    #[arg(long, value_delimiter = ',')] checkpoint: Vec<PathBuf>,
    #[arg(long)] data: PathBuf,
    /// Training count range, for range extrapolation
    #[arg(long)] train_range: String,
    /// Synthesized test ranges such as 6-9,1-5
    #[arg(long, value_delimiter = ',')] test_ranges: Vec<String>,
    #[arg(long)] per_count: usize,
});

opt_args!(LensArgs {
    #[arg(long)] checkpoint: PathBuf,
    #[arg(long)] data: PathBuf,
    #[arg(long)] limit: usize,
    #[arg(long)] top_k: usize,
});

opt_args!(HeadlensArgs {
    #[arg(long)] checkpoint: PathBuf,
    #[arg(long)] data: PathBuf,
    /// vap-head report supplying importance scores
    #[arg(long)] importance: PathBuf,
    #[arg(long)] translator_steps: usize,
    #[arg(long)] translator_lr: f64,
    #[arg(long)] limit: usize,
    /// last-prompt-token or last-image-token
    #[arg(long)] decode_position: String,
    /// JSON lexicon file (counting/visual/awareness word lists)
    #[arg(long)] lexicons: PathBuf,
});

opt_args!(VapLayerArgs {
    #[arg(long)] checkpoint: PathBuf,
    /// Pair corpus written by `gen --pairs`
    #[arg(long)] pairs: PathBuf,
    /// Token groups; all six when omitted
    #[arg(long, value_delimiter = ',')] group: Vec<String>,
});

opt_args!(VapHeadArgs {
    #[arg(long)] checkpoint: PathBuf,
    #[arg(long)] pairs: PathBuf,
    #[arg(long)] threshold: f64,
});

opt_args!(AblateArgs {
    #[arg(long)] checkpoint: PathBuf,
    #[arg(long)] data: PathBuf,
    /// count, verify, color or shape
    #[arg(long)] task: String,
    #[arg(long)] k: usize,
    #[arg(long)] corpus_size: usize,
});

opt_args!(JaccardArgs {
    /// Head-set files written by `interp ablate`
    #[arg(long, value_delimiter = ',')] sets: Vec<PathBuf>,
    #[arg(long)] checkpoint: PathBuf,
    #[arg(long)] data: PathBuf,
    #[arg(long, value_delimiter = ',')] tasks: Vec<String>,
    #[arg(long)] k: usize,
    #[arg(long)] corpus_size: usize,
});

opt_args!(ProbeArgs {
    #[arg(long)] checkpoint: PathBuf,
    #[arg(long)] data: PathBuf,
    /// binding, numerosity or attentionlens
    #[arg(long)] kind: String,
    #[arg(long, value_delimiter = ',')] layers: Vec<usize>,
    #[arg(long)] rank: usize,
    #[arg(long)] steps: usize,
    /// Heads for attention-lens probes; all when omitted
    #[arg(long, value_delimiter = ',')] heads: Vec<usize>,
});

opt_args!(YesbandArgs {
    #[arg(long)] checkpoint: PathBuf,
    #[arg(long)] data: PathBuf,
    #[arg(long)] k_min: usize,
    #[arg(long)] k_max: usize,
    #[arg(long)] limit: usize,
});

opt_args!(InterveneArgs {
    #[arg(long)] checkpoint: PathBuf,
    #[arg(long)] data: PathBuf,
    /// vap-head report supplying per-head gamma
    #[arg(long)] importance: PathBuf,
    /// Temperature sweep values
    #[arg(long, value_delimiter = ',')] alpha: Vec<f64>,
    /// Importance threshold for targeted heads
    #[arg(long)] threshold: f64,
    /// Output reweighting strength; off when omitted
    #[arg(long)] eta: f64,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")] raw_gamma: bool,
});

opt_args!(ReportArgs {
    /// JSON report to render
    #[arg(long)] input: PathBuf,
    /// importance, img-attn, obj-in-img, cter, vgs, top1 or gt-at-10
    #[arg(long)] heatmap: String,
    /// Write the CSV curve of a vap-layer report
    #[arg(long, num_args = 0..=1, default_missing_value = "true")] curve: bool,
    #[arg(long)] cell_px: usize,
});

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cmd::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(config::exit_code(&e))
        }
    }
}
