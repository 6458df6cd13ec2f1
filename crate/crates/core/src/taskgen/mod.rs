//! Labeled synthetic tasks (foreground segmentation, single-object box
//! masks, colorization) and their on-disk layout.

mod io;
pub mod ppm;
pub mod scene;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset, save_dataset};
pub use scene::{class_tag, N_CLASSES};

use crate::error::{Error, Result};
use crate::image::{to_byte, ImageGrid};
use crate::par::{self, Exec};
use crate::rng::{mix, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Seg,
    Det,
    Color,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Seg => "seg",
            Task::Det => "det",
            Task::Color => "color",
        }
    }

    /// Segmentation and detection are scored by mIoU, colorization by MSE.
    pub fn is_binary(self) -> bool {
        !matches!(self, Task::Color)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" => Ok(Task::Seg),
            "det" => Ok(Task::Det),
            "color" => Ok(Task::Color),
            _ => Err(Error::Config(format!("unknown task `{s}` (seg|det|color)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    QueryTrain,
    QueryTest,
    Prompt,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::QueryTrain => "query_train",
            Split::QueryTest => "query_test",
            Split::Prompt => "prompt",
        }
    }

    fn id_prefix(self) -> char {
        match self {
            Split::QueryTrain => 'q',
            Split::QueryTest => 't',
            Split::Prompt => 'p',
        }
    }

    fn stream_code(self) -> u64 {
        match self {
            Split::QueryTrain => 1,
            Split::QueryTest => 2,
            Split::Prompt => 3,
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query_train" => Ok(Split::QueryTrain),
            "query_test" => Ok(Split::QueryTest),
            "prompt" => Ok(Split::Prompt),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageGrid,
    pub label: ImageGrid,
    pub class_tag: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub train_queries: Vec<Sample>,
    pub prompt_db: Vec<Sample>,
    pub test_queries: Vec<Sample>,
}

impl Dataset {
    pub fn side(&self) -> Option<usize> {
        self.prompt_db.first().map(|s| s.image.side())
    }

    pub fn splits(&self) -> [(Split, &[Sample]); 3] {
        [
            (Split::QueryTrain, &self.train_queries),
            (Split::QueryTest, &self.test_queries),
            (Split::Prompt, &self.prompt_db),
        ]
    }

    pub fn find_query(&self, id: &str) -> Option<&Sample> {
        self.train_queries
            .iter()
            .chain(&self.test_queries)
            .find(|s| s.id == id)
    }

    /// Fewest prompts of any class that appears among the queries.
    pub fn min_class_coverage(&self) -> usize {
        self.train_queries
            .iter()
            .chain(&self.test_queries)
            .map(|q| {
                self.prompt_db
                    .iter()
                    .filter(|p| p.class_tag == q.class_tag)
                    .count()
            })
            .min()
            .unwrap_or(0)
    }

    pub fn check_coverage(&self, k: usize) -> Result<()> {
        let cov = self.min_class_coverage();
        if cov < k {
            return Err(Error::Config(format!(
                "prompt database holds only {cov} prompts for some query class, need K = {k}"
            )));
        }
        Ok(())
    }
}

/// Item counts for one generated dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenConfig {
    pub seed: u64,
    pub n_queries: usize,
    pub n_test: usize,
    pub n_prompts: usize,
    pub side: usize,
}

impl GenConfig {
    /// Held-out queries default to a quarter of the training queries.
    pub fn new(seed: u64, n_queries: usize, n_prompts: usize, side: usize) -> Self {
        Self {
            seed,
            n_queries,
            n_test: (n_queries / 4).max(1),
            n_prompts,
            side,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.side < 16 {
            return Err(Error::Config(format!("image side must be >= 16, got {}", self.side)));
        }
        if self.n_queries == 0 || self.n_test == 0 || self.n_prompts == 0 {
            return Err(Error::Config("sample counts must be >= 1".into()));
        }
        if self.n_prompts < N_CLASSES {
            return Err(Error::Config(format!(
                "{} prompts cannot cover all {N_CLASSES} classes",
                self.n_prompts
            )));
        }
        Ok(())
    }
}

pub fn gen_segmentation_set(seed: u64, n_queries: usize, n_prompts: usize, side: usize) -> Result<Dataset> {
    generate(Task::Seg, &GenConfig::new(seed, n_queries, n_prompts, side), Exec::default())
}

pub fn gen_detection_set(seed: u64, n_queries: usize, n_prompts: usize, side: usize) -> Result<Dataset> {
    generate(Task::Det, &GenConfig::new(seed, n_queries, n_prompts, side), Exec::default())
}

pub fn gen_colorization_set(seed: u64, n_queries: usize, n_prompts: usize, side: usize) -> Result<Dataset> {
    generate(Task::Color, &GenConfig::new(seed, n_queries, n_prompts, side), Exec::default())
}

/// Item `i` of a split draws from its own stream `mix(mix(seed, split), i)`,
/// so items are independent of the split sizes and of generation order.
pub fn generate(task: Task, cfg: &GenConfig, exec: Exec) -> Result<Dataset> {
    cfg.validate()?;
    let make = |split: Split, n: usize| -> Vec<Sample> {
        let split_seed = mix(cfg.seed, split.stream_code());
        par::map_range(exec, n, |i| {
            let class = i % N_CLASSES;
            let mut rng = stream(split_seed, i as u64);
            let scene = scene::render(&mut rng, cfg.side, class);
            let (image, label) = match task {
                Task::Seg => {
                    let label = scene.mask_image();
                    (scene.image, label)
                }
                Task::Det => {
                    let label = scene.box_image();
                    (scene.image, label)
                }
                Task::Color => colorization_pair(&scene.image),
            };
            Sample {
                id: format!("{}{:05}", split.id_prefix(), i),
                image,
                label,
                class_tag: class_tag(class),
            }
        })
    };
    Ok(Dataset {
        train_queries: make(Split::QueryTrain, cfg.n_queries),
        test_queries: make(Split::QueryTest, cfg.n_test),
        prompt_db: make(Split::Prompt, cfg.n_prompts),
    })
}

/// Label is the colour scene snapped so every pixel's luma sits on the 8-bit
/// grid; the input image is that luma replicated over three channels.
fn colorization_pair(colour: &ImageGrid) -> (ImageGrid, ImageGrid) {
    let side = colour.side();
    let mut label = colour.clone();
    let mut gray = colour.clone();
    for y in 0..side {
        for x in 0..side {
            let rgb = colour.pixel(y, x).map(to_byte);
            let (snapped, k) = scene::snap_to_luma_lattice(rgb);
            label.set_pixel(y, x, snapped.map(|c| c as f32 / 255.0));
            let v = k as f32 / 255.0;
            gray.set_pixel(y, x, [v; 3]);
        }
    }
    (gray, label)
}
