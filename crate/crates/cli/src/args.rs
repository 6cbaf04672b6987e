use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use pointtree::data::{Benchmark, ShapeKind};
use pointtree::io::Format;
use pointtree::model::{Merge, ModelConfig, Task, DESK_DIMS};
use pointtree::sampler::DistributionKind;
use pointtree::SplitRule;

#[derive(Debug, Parser)]
#[command(name = "pointtree", version, about = "Point clouds on PCA-guided relaxed K-D trees")]
pub struct Cli {
    /// Master seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output format for point clouds.
    #[arg(long, global = true, default_value = "xyz")]
    pub format: Format,
    /// Output path; `-` is stdout.
    #[arg(long, global = true, default_value = "-")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replace a cloud by its PCA scores.
    Prealign(PrealignArgs),
    /// Build a K-D tree and print its layers.
    Tree(TreeArgs),
    /// Expected angle difference between two index-matched clouds.
    Ead(EadArgs),
    /// Apply random transforms to a dataset directory.
    Transform(TransformArgs),
    /// Write a synthetic benchmark as train/val/test dataset directories.
    Generate(GenerateArgs),
    /// Write one synthetic shape.
    Shape(ShapeArgs),
    /// Mean EAD over many random transforms of one random cloud.
    EadTable(EadTableArgs),
    /// Train a model; writes a checkpoint to --out and metrics to stdout.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PrealignArgs {
    pub input: PathBuf,
    /// Alternate alignment with per-axis rescaling.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    pub iterative: bool,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    Axis,
    Pca,
}

impl From<RuleArg> for SplitRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Axis => SplitRule::AxisMedian,
            RuleArg::Pca => SplitRule::PcaMedian,
        }
    }
}

#[derive(Debug, Args)]
pub struct TreeArgs {
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = RuleArg::Pca)]
    pub rule: RuleArg,
    /// Pad to the next power of two with seeded duplicates.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    pub pad: bool,
}

#[derive(Debug, Args)]
pub struct EadArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    /// Average over every triple.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    pub exact: bool,
    /// Monte-Carlo triples when not exact.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    /// A dataset directory, or a root holding train/val/test ones.
    pub input: PathBuf,
    #[arg(long, default_value = "affine")]
    pub dist: DistributionKind,
    /// Transformed copies per record.
    #[arg(long, default_value_t = 1)]
    pub augment: usize,
    /// Candidates scored by the aggressive sampler.
    #[arg(long, default_value_t = pointtree::sampler::DEFAULT_CANDIDATES)]
    pub candidates: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value = "cls3")]
    pub benchmark: Benchmark,
    /// Train, val and test sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [600, 150, 150])]
    pub counts: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    pub points: usize,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct ShapeArgs {
    #[arg(long, default_value = "s-shape")]
    pub kind: ShapeKind,
    #[arg(long, default_value_t = 128)]
    pub points: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct EadTableArgs {
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    #[arg(long, default_value_t = 3000)]
    pub transforms: usize,
    #[arg(long, default_value = "affine")]
    pub dist: DistributionKind,
    /// Pre-align both clouds before measuring.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    pub prealign: bool,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = pointtree::sampler::DEFAULT_CANDIDATES)]
    pub candidates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Classify,
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MergeArg {
    Max,
    ConcatMlp,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::Classify)]
    pub task: TaskArg,
    /// Tree depth; clouds are padded to 2^depth points.
    #[arg(long, default_value_t = 7)]
    pub depth: usize,
    /// Feature widths bottom-up, depth + 1 values.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long, default_value_t = 16)]
    pub leaf_hidden: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [64, 32])]
    pub cls_hidden: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub carry_dim: usize,
    /// Defaults to the largest class label in the training data plus one.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Defaults to the largest part label in the training data plus one.
    #[arg(long)]
    pub parts: Option<usize>,
    #[arg(long, value_enum, default_value_t = MergeArg::Max)]
    pub merge: MergeArg,
    #[arg(long, value_enum, default_value_t = RuleArg::Pca)]
    pub rule: RuleArg,
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true", action = ArgAction::Set)]
    pub prealign: bool,
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    pub align_net: bool,
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true", action = ArgAction::Set)]
    pub augment_flip: bool,
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    pub augment_affine: bool,
}

impl ModelArgs {
    /// Fills label counts from data and derives the width schedule.
    pub fn resolve(&mut self, classes: usize, parts: usize) {
        self.classes.get_or_insert(classes);
        self.parts.get_or_insert(parts);
        if self.dims.is_none() {
            self.dims = Some(if self.depth == 7 {
                DESK_DIMS.to_vec()
            } else {
                ModelConfig::classification(2).with_depth(self.depth, 8, 64).dims
            });
        }
    }

    pub fn config(&self) -> ModelConfig {
        let task = match self.task {
            TaskArg::Classify => Task::Classify,
            TaskArg::Segment => Task::Segment,
        };
        ModelConfig {
            task,
            depth: self.depth,
            dims: self.dims.clone().unwrap_or_default(),
            leaf_hidden: self.leaf_hidden,
            classifier_hidden: [self.cls_hidden[0], self.cls_hidden[1]],
            carry_dim: self.carry_dim,
            classes: if task == Task::Classify {
                self.classes.unwrap_or(0)
            } else {
                0
            },
            parts: if task == Task::Segment {
                self.parts.unwrap_or(0)
            } else {
                0
            },
            merge: match self.merge {
                MergeArg::Max => Merge::Max,
                MergeArg::ConcatMlp => Merge::ConcatMlp,
            },
            rule: self.rule.into(),
            use_prealign: self.prealign,
            use_alignment_net: self.align_net,
            augment_flip: self.augment_flip,
            augment_affine: self.augment_affine,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Root holding train/ and val/ dataset directories.
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub model: ModelArgs,
}

fn quote(s: &str) -> String {
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_./,:=+".contains(c)) {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}

fn path(p: &std::path::Path) -> String {
    quote(&p.to_string_lossy())
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn value_name<T: ValueEnum>(v: &T) -> String {
    v.to_possible_value()
        .expect("no skipped variants")
        .get_name()
        .to_string()
}

impl ModelArgs {
    fn render(&self, out: &mut String) {
        let _ = write!(
            out,
            " --task {} --depth {} --dims {} --leaf-hidden {} --cls-hidden {} --carry-dim {}",
            value_name(&self.task),
            self.depth,
            join(self.dims.as_deref().unwrap_or_default()),
            self.leaf_hidden,
            join(&self.cls_hidden),
            self.carry_dim,
        );
        if let Some(c) = self.classes {
            let _ = write!(out, " --classes {c}");
        }
        if let Some(p) = self.parts {
            let _ = write!(out, " --parts {p}");
        }
        let _ = write!(
            out,
            " --merge {} --rule {} --prealign {} --align-net {} --augment-flip {} --augment-affine {}",
            value_name(&self.merge),
            value_name(&self.rule),
            self.prealign,
            self.align_net,
            self.augment_flip,
            self.augment_affine,
        );
    }
}

impl Cli {
    /// The fully resolved command line, runnable as is.
    pub fn config_line(&self) -> String {
        let mut s = format!(
            "# config: pointtree --seed {} --format {} --out {}",
            self.seed,
            self.format.name(),
            path(&self.out)
        );
        let w = &mut s;
        match &self.command {
            Command::Prealign(a) => {
                let _ = write!(
                    w,
                    " prealign {} --iterative {} --max-iter {}",
                    path(&a.input),
                    a.iterative,
                    a.max_iter
                );
            }
            Command::Tree(a) => {
                let _ = write!(
                    w,
                    " tree {} --rule {} --pad {}",
                    path(&a.input),
                    value_name(&a.rule),
                    a.pad
                );
            }
            Command::Ead(a) => {
                let _ = write!(
                    w,
                    " ead {} {} --exact {} --samples {}",
                    path(&a.a),
                    path(&a.b),
                    a.exact,
                    a.samples
                );
            }
            Command::Transform(a) => {
                let _ = write!(
                    w,
                    " transform {} --dist {} --augment {} --candidates {}",
                    path(&a.input),
                    a.dist,
                    a.augment,
                    a.candidates
                );
            }
            Command::Generate(a) => {
                let _ = write!(
                    w,
                    " generate --benchmark {} --counts {} --points {} --noise {:?}",
                    a.benchmark.name(),
                    join(&a.counts),
                    a.points,
                    a.noise
                );
            }
            Command::Shape(a) => {
                let _ = write!(
                    w,
                    " shape --kind {} --points {} --noise {:?}",
                    a.kind.name(),
                    a.points,
                    a.noise
                );
            }
            Command::EadTable(a) => {
                let _ = write!(
                    w,
                    " ead-table --points {} --transforms {} --dist {} --prealign {} --samples {} --candidates {}",
                    a.points, a.transforms, a.dist, a.prealign, a.samples, a.candidates
                );
            }
            Command::Train(a) => {
                let _ = write!(w, " train {}", path(&a.data));
                a.model.render(w);
                let _ = write!(
                    w,
                    " --epochs {} --batch-size {} --lr {:?} --patience {}",
                    a.epochs, a.batch_size, a.lr, a.patience
                );
            }
            Command::Eval(a) => {
                let _ = write!(
                    w,
                    " eval {} --checkpoint {} --split {}",
                    path(&a.data),
                    path(&a.checkpoint),
                    quote(&a.split)
                );
                a.model.render(w);
            }
        }
        s
    }
}
