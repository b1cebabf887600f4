use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::{parse_list, ConfigFile, Reader};
use crate::costmodel::{LlmSpec, Strategy};
use crate::data::SyntheticVideoSpec;
use crate::distill::TrainConfig;
use crate::encoder::{EncoderSpec, Role};
use crate::error::{Error, Result};

/// Environment variable that replaces every seed in a run configuration.
pub const SEED_ENV: &str = "LITETOK_SEED";

pub const SECTIONS: [&str; 5] = ["data", "teacher", "student", "train", "profile"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentInit {
    /// Sliced copy of the teacher.
    Teacher,
    /// Fresh initialization from the student seed.
    Random,
}

impl fmt::Display for StudentInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StudentInit::Teacher => "teacher",
            StudentInit::Random => "random",
        })
    }
}

impl FromStr for StudentInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(StudentInit::Teacher),
            "random" => Ok(StudentInit::Random),
            _ => Err(Error::Config(format!("unknown student init {s:?} (expected teacher|random)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// ViT-Large teacher, ViT-Base students and a 7B-class LLM.
    Full,
    /// The `[teacher]` and `[student]` encoders of this file.
    Desk,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Full => "full",
            Scale::Desk => "desk",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            _ => Err(Error::Config(format!("unknown scale {s:?} (expected full|desk)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeasureComponent {
    /// Forward passes of the desk encoders.
    Encoder,
    /// A fixed arithmetic workload, for checking the harness itself.
    Stub,
}

impl fmt::Display for MeasureComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MeasureComponent::Encoder => "encoder",
            MeasureComponent::Stub => "stub",
        })
    }
}

impl FromStr for MeasureComponent {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(MeasureComponent::Encoder),
            "stub" => Ok(MeasureComponent::Stub),
            _ => Err(Error::Config(format!("unknown component {s:?} (expected encoder|stub)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub spec: SyntheticVideoSpec,
    /// Existing corpus directory; when absent the corpus is generated in
    /// memory from `spec`.
    pub corpus: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub spec: EncoderSpec,
    pub seed: u64,
    /// Saved parameters; when absent the teacher is initialized from `seed`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentConfig {
    pub spec: EncoderSpec,
    pub init: StudentInit,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileConfig {
    pub scale: Scale,
    pub frames: Vec<usize>,
    pub strategies: Vec<Strategy>,
    /// Tokens per frame handed to the LLM before any compression.
    pub tokens_per_frame: usize,
    pub llm: LlmSpec,
    pub measure: bool,
    pub component: MeasureComponent,
    pub warmup: usize,
    pub iters: usize,
    /// CSV destination; standard output when absent.
    pub out: Option<PathBuf>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            scale: Scale::Full,
            frames: vec![8, 16, 32, 64, 128, 256, 512],
            strategies: vec![Strategy::None, Strategy::Posthoc(16), Strategy::Internal(16)],
            tokens_per_frame: 256,
            llm: LlmSpec::qwen2_5_7b(),
            measure: false,
            component: MeasureComponent::Encoder,
            warmup: 40,
            iters: 100,
            out: None,
        }
    }
}

/// A fully resolved run: every key has a value, relative paths are
/// anchored at the configuration file's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub train: TrainConfig,
    /// Run directory for the log, the echoed configuration and checkpoints.
    pub out_dir: PathBuf,
    pub profile: ProfileConfig,
}

pub(crate) fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
    }
}

fn path_key(r: &mut Reader<'_>, key: &str, base: &Path) -> Result<Option<PathBuf>> {
    Ok(r.get::<String>(key)?.map(|p| base.join(p)))
}

impl DataConfig {
    fn read(cfg: &ConfigFile, base: &Path, seed: Option<u64>) -> Result<Self> {
        let mut r = cfg.reader("data");
        let mut spec = SyntheticVideoSpec::from_reader(&mut r)?;
        let corpus = path_key(&mut r, "corpus", base)?;
        r.finish()?;
        if let Some(s) = seed {
            spec.seed = s;
        }
        Ok(Self { spec, corpus })
    }

    /// Only the `[data]` section of `path`, as used by corpus generation.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg = ConfigFile::read(path)?;
        cfg.expect_sections(&SECTIONS)?;
        Self::read(&cfg, &base_dir(path), seed_override()?)
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

impl ProfileConfig {
    fn read(r: &mut Reader<'_>, base: &Path) -> Result<Self> {
        let d = Self::default();
        let q = LlmSpec::qwen2_5_7b();
        let cfg = Self {
            scale: r.get_or("scale", d.scale)?,
            frames: r.get_with("frames", |s| parse_list(s))?.unwrap_or(d.frames),
            strategies: r.get_with("strategies", |s| parse_list(s))?.unwrap_or(d.strategies),
            tokens_per_frame: r.get_or("tokens_per_frame", d.tokens_per_frame)?,
            llm: LlmSpec {
                layers: r.get_or("llm_layers", q.layers)?,
                dim: r.get_or("llm_dim", q.dim)?,
                mlp_ratio: r.get_or("llm_mlp_ratio", q.mlp_ratio)?,
                query_heads: r.get_or("llm_query_heads", q.query_heads)?,
                kv_heads: r.get_or("llm_kv_heads", q.kv_heads)?,
            },
            measure: r.get_or("measure", d.measure)?,
            component: r.get_or("component", d.component)?,
            warmup: r.get_or("warmup", d.warmup)?,
            iters: r.get_or("iters", d.iters)?,
            out: path_key(r, "out", base)?,
        };
        if cfg.frames.is_empty() || cfg.frames.contains(&0) || cfg.strategies.is_empty() {
            return Err(r.error("profile needs positive frame counts and at least one strategy"));
        }
        if cfg.tokens_per_frame == 0 || cfg.iters == 0 {
            return Err(r.error("tokens_per_frame and iters must be positive"));
        }
        cfg.llm.validate()?;
        if cfg.measure && cfg.component == MeasureComponent::Encoder && cfg.scale == Scale::Full {
            return Err(r.error("measuring encoders needs scale = desk (full-scale encoders are not runnable here)"));
        }
        Ok(cfg)
    }

    fn to_kv(&self) -> String {
        let list = |v: Vec<String>| v.join(", ");
        let mut s = format!(
            "scale = {}\nframes = {}\nstrategies = {}\ntokens_per_frame = {}\nllm_layers = {}\nllm_dim = {}\n\
             llm_mlp_ratio = {}\nllm_query_heads = {}\nllm_kv_heads = {}\nmeasure = {}\ncomponent = {}\n\
             warmup = {}\niters = {}\n",
            self.scale,
            list(self.frames.iter().map(ToString::to_string).collect()),
            list(self.strategies.iter().map(ToString::to_string).collect()),
            self.tokens_per_frame,
            self.llm.layers,
            self.llm.dim,
            self.llm.mlp_ratio,
            self.llm.query_heads,
            self.llm.kv_heads,
            self.measure,
            self.component,
            self.warmup,
            self.iters
        );
        if let Some(p) = &self.out {
            s.push_str(&format!("out = {}\n", p.display()));
        }
        s
    }
}

impl RunConfig {
    /// Reads and resolves a run file. Unknown sections and keys are
    /// errors; `LITETOK_SEED`, when set, replaces every seed.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, seed_override()?)
    }

    pub fn parse(text: &str, path: &Path, seed: Option<u64>) -> Result<Self> {
        let cfg = ConfigFile::parse(text, path)?;
        cfg.expect_sections(&SECTIONS)?;
        let base = base_dir(path);
        let data = DataConfig::read(&cfg, &base, seed)?;

        let mut r = cfg.reader("teacher");
        let mut teacher = TeacherConfig {
            spec: EncoderSpec::from_reader(&mut r, Role::Teacher)?,
            seed: r.get_or("seed", 0)?,
            checkpoint: path_key(&mut r, "checkpoint", &base)?,
        };
        r.finish()?;

        let mut r = cfg.reader("student");
        let mut student = StudentConfig {
            spec: EncoderSpec::from_reader(&mut r, Role::Student)?,
            init: r.get_or("init", StudentInit::Teacher)?,
            seed: r.get_or("seed", 0)?,
        };
        r.finish()?;

        let mut r = cfg.reader("train");
        let mut train = TrainConfig::from_reader(&mut r)?;
        let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        let out_dir = path_key(&mut r, "out_dir", &base)?.unwrap_or_else(|| base.join(format!("{stem}.run")));
        r.finish()?;

        let mut r = cfg.reader("profile");
        let profile = ProfileConfig::read(&mut r, &base)?;
        r.finish()?;

        if let Some(s) = seed {
            teacher.seed = s;
            student.seed = s;
            train.seed = s;
        }
        let run = Self {
            data,
            teacher,
            student,
            train,
            out_dir,
            profile,
        };
        run.check()?;
        Ok(run)
    }

    fn check(&self) -> Result<()> {
        let (t, s) = (&self.teacher.spec, &self.student.spec);
        if t.input_px != s.input_px || t.patch != s.patch || s.distill_proj_dim != Some(t.dim) {
            return Err(Error::Config(format!(
                "student (px {}, patch {}, projection {:?}) does not match teacher (px {}, patch {}, dim {})",
                s.input_px, s.patch, s.distill_proj_dim, t.input_px, t.patch, t.dim
            )));
        }
        if self.data.spec.px != t.input_px {
            return Err(Error::Config(format!(
                "corpus resolution {} differs from encoder input {}",
                self.data.spec.px, t.input_px
            )));
        }
        s.output_grid(self.train.clip_frames)?;
        Ok(())
    }

    /// The resolved configuration in the same format; parsing it yields an
    /// equal `RunConfig` (with absolute or base-relative paths preserved).
    pub fn to_text(&self) -> String {
        let mut s = format!("[data]\n{}", self.data.spec.to_kv());
        if let Some(c) = &self.data.corpus {
            s.push_str(&format!("corpus = {}\n", c.display()));
        }
        s.push_str(&format!("\n[teacher]\n{}seed = {}\n", self.teacher.spec.to_kv(), self.teacher.seed));
        if let Some(c) = &self.teacher.checkpoint {
            s.push_str(&format!("checkpoint = {}\n", c.display()));
        }
        s.push_str(&format!(
            "\n[student]\n{}init = {}\nseed = {}\n",
            self.student.spec.to_kv(),
            self.student.init,
            self.student.seed
        ));
        s.push_str(&format!("\n[train]\n{}out_dir = {}\n", self.train.to_kv(), self.out_dir.display()));
        s.push_str(&format!("\n[profile]\n{}", self.profile.to_kv()));
        s
    }
}
