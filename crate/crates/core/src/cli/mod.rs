//! The `litetok` command line: corpus generation, distillation runs,
//! compression of stored feature maps and cost profiling.
//!
//! Failures print one `litetok: ...` line on standard error and map to an
//! exit code: 3 for numeric aborts, 4 for non-divisible partitions and 2
//! for every other configuration, file or shape problem.

mod run_config;

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use run_config::{
    DataConfig, MeasureComponent, ProfileConfig, RunConfig, Scale, StudentConfig, StudentInit, TeacherConfig,
    SEED_ENV,
};

use crate::compression::{compress, partition_blocks, wap_compress, BlockPartition, CompressedMap, FeatureMap, Method};
use crate::config::{parse_triple, ConfigFile};
use crate::costmodel::{bottleneck_report, wallclock_profile, ArchSpec, CostReport, Family, Strategy};
use crate::data::{generate_videos, read_corpus, write_corpus, SyntheticVideoSpec};
use crate::distill::{train, Dataset, Objective, RtdDecoder, TrainLog};
use crate::encoder::{init_params, init_student_from_teacher, student_forward, teacher_forward, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{ltf, Tensor};
use crate::rng::SplitMix64;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_PARTITION: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "litetok", version, about = "Spatio-temporal visual token compression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic video corpus (LTF1 clips plus manifest.cfg).
    GenData {
        /// Corpus keys, top-level or in a [data] section.
        spec: PathBuf,
        out: PathBuf,
    },
    /// Distill the configured teacher into the student.
    Distill { config: PathBuf },
    /// Compress a stored feature map to a target grid.
    Compress {
        /// wap, avg, max, sub or tome.
        #[arg(long)]
        method: Method,
        /// Target grid `t,h,w`.
        #[arg(long, value_parser = parse_target)]
        target: [usize; 3],
        /// Patch tokens `[T, H, W, C]`.
        tokens: PathBuf,
        /// Class tokens `[T, C]`.
        cls: PathBuf,
        out: PathBuf,
    },
    /// Print the cost report of the [profile] section as CSV.
    Profile { config: PathBuf },
}

fn parse_target(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_triple(s).map_err(|e| e.to_string())
}

/// Exit status for a failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Partition(_) => EXIT_PARTITION,
        _ => EXIT_CONFIG,
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            eprintln!("litetok: {}", one_line(first.trim_start_matches("error: ")));
            return EXIT_CONFIG;
        }
    };
    let result = match cli.command {
        Command::GenData { spec, out } => cmd_gen_data(&spec, &out),
        Command::Distill { config } => cmd_distill(&config),
        Command::Compress {
            method,
            target,
            tokens,
            cls,
            out,
        } => cmd_compress(method, target, &tokens, &cls, &out),
        Command::Profile { config } => cmd_profile(&config),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("litetok: {}", one_line(&e.to_string()));
            exit_code(&e)
        }
    }
}

fn cmd_gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let cfg = ConfigFile::read(spec_path)?;
    let top_level = cfg.section("").is_some_and(|s| !s.entries.is_empty());
    let spec = if top_level {
        if let Some(s) = cfg.sections.get(1) {
            return Err(Error::Config(format!(
                "{}:{}: section [{}] mixed with top-level corpus keys",
                spec_path.display(),
                s.line,
                s.name
            )));
        }
        let mut r = cfg.reader("");
        let mut spec = SyntheticVideoSpec::from_reader(&mut r)?;
        r.finish()?;
        if let Some(seed) = run_config::seed_override()? {
            spec.seed = seed;
        }
        spec
    } else {
        DataConfig::load(spec_path)?.spec
    };
    let videos = write_corpus(&spec, out)?;
    println!("wrote {} videos of {}x{}x{}x3 to {}", videos.len(), spec.frames, spec.px, spec.px, out.display());
    Ok(())
}

fn load_dataset(data: &DataConfig) -> Result<Dataset> {
    match &data.corpus {
        Some(dir) => Ok(read_corpus(dir)?.1),
        None => Ok(Dataset {
            videos: generate_videos(&data.spec)?,
            native_fps: data.spec.native_fps,
        }),
    }
}

fn load_teacher(t: &TeacherConfig) -> Result<ModelParams<f32>> {
    match &t.checkpoint {
        Some(dir) => {
            let p = ModelParams::load(dir)?;
            if p.spec != t.spec {
                return Err(Error::Config(format!(
                    "teacher checkpoint {} does not match the [teacher] section",
                    dir.display()
                )));
            }
            Ok(p)
        }
        None => init_params(&t.spec, t.seed),
    }
}

fn init_student(run: &RunConfig, teacher: &ModelParams<f32>) -> Result<ModelParams<f32>> {
    match run.student.init {
        StudentInit::Teacher => init_student_from_teacher(teacher, &run.student.spec),
        StudentInit::Random => init_params(&run.student.spec, run.student.seed),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn cmd_distill(config: &Path) -> Result<()> {
    let run = RunConfig::load(config)?;
    let out = &run.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join("run.cfg"), run.to_text())?;

    let data = load_dataset(&run.data)?;
    let teacher = load_teacher(&run.teacher)?;
    let mut student = init_student(&run, &teacher)?;
    // The decoder reconstructs teacher-width tokens from the student's
    // projected output.
    let mut decoder = match run.train.objective {
        Objective::Rtd => Some(RtdDecoder::new(
            teacher.spec.dim,
            teacher.spec.heads,
            run.student.spec.ratio(),
            run.train.seed.wrapping_add(1),
        )?),
        Objective::Ctd => None,
    };

    let every = run.train.checkpoint_every;
    let mut records = Vec::new();
    let result = train(&mut student, decoder.as_mut(), &teacher, &data, &run.train, |rec, params| {
        records.push(rec.clone());
        if every > 0 && (rec.step + 1) % every == 0 {
            params.save(out.join("checkpoints").join(format!("step_{:06}", rec.step + 1)))?;
        }
        Ok(())
    });
    // The log is written even when the run aborts, up to the last
    // completed step.
    let log = TrainLog { records };
    write_file(&out.join("log.csv"), log.to_csv())?;
    result?;

    student.save(out.join("student"))?;
    if let Some(dec) = &decoder {
        let dir = out.join("decoder");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, t) in &dec.tensors {
            ltf::write(dir.join(format!("{name}.ltf")), t)?;
        }
    }
    let losses = log.losses();
    match (losses.first(), losses.last()) {
        (Some(a), Some(b)) => println!(
            "distill: {} steps ({}), loss {a:.6} -> {b:.6}, run dir {}",
            losses.len(),
            run.train.objective,
            out.display()
        ),
        _ => println!("distill: 0 steps, run dir {}", out.display()),
    }
    Ok(())
}

/// Reads a feature map and compresses it; the CLI and the round-trip tests
/// share this path.
pub fn compress_files(method: Method, target: [usize; 3], tokens: &Path, cls: &Path) -> Result<CompressedMap<f32>> {
    let fm = FeatureMap::new(ltf::read(tokens)?, ltf::read(cls)?)?;
    let (t, h, w, _) = fm.dims();
    let part = partition_blocks([t, h, w], target)?;
    compress(&fm, &part, method)
}

fn cmd_compress(method: Method, target: [usize; 3], tokens: &Path, cls: &Path, out: &Path) -> Result<()> {
    let cm = compress_files(method, target, tokens, cls)?;
    ltf::write(out, &cm.tokens)?;
    write_file(&provenance_path(out), format!("{}\n", cm.provenance))
}

/// `<out>.provenance`, next to the compressed tokens.
pub fn provenance_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".provenance");
    PathBuf::from(s)
}

fn arch_pair(run: &RunConfig) -> (ArchSpec, ArchSpec) {
    match run.profile.scale {
        Scale::Full => (
            ArchSpec::vit_large_teacher(),
            ArchSpec::vit_base_student(Family::DwTempConv),
        ),
        Scale::Desk => (
            ArchSpec::from_encoder(&run.teacher.spec, run.train.clip_frames),
            ArchSpec::from_encoder(&run.student.spec, run.train.clip_frames),
        ),
    }
}

/// Analytic rows for every `(frames, strategy)` pair, frames outermost.
pub fn profile_reports(run: &RunConfig) -> Result<Vec<CostReport>> {
    let (teacher, student) = arch_pair(run);
    let p = &run.profile;
    let mut rows = Vec::new();
    for &frames in &p.frames {
        for &strategy in &p.strategies {
            rows.push(bottleneck_report(&teacher, &student, &p.llm, strategy, frames, p.tokens_per_frame)?);
        }
    }
    Ok(rows)
}

struct Encoders {
    teacher: ModelParams<f32>,
    student: ModelParams<f32>,
}

fn measure_vision(run: &RunConfig, enc: Option<&Encoders>, report: &CostReport) -> Result<f64> {
    let p = &run.profile;
    let profile = match enc {
        None => wallclock_profile(
            || {
                std::hint::black_box((0..20_000u64).fold(0u64, |a, i| a.wrapping_mul(31).wrapping_add(i)));
                Ok(())
            },
            p.warmup,
            p.iters,
        )?,
        Some(enc) => {
            let px = run.teacher.spec.input_px;
            let mut rng = SplitMix64::new(run.data.spec.seed);
            let clip = Tensor::<f32>::from_fn(&[report.frames, px, px, 3], |_| rng.uniform() as f32);
            match report.strategy {
                Strategy::None => wallclock_profile(|| teacher_forward(&clip, &enc.teacher).map(drop), p.warmup, p.iters)?,
                Strategy::Posthoc(r) => {
                    let (t, g) = (report.frames, run.teacher.spec.grid());
                    let part = posthoc_partition(t, g, r)?;
                    wallclock_profile(
                        || wap_compress(&teacher_forward(&clip, &enc.teacher)?, &part).map(drop),
                        p.warmup,
                        p.iters,
                    )?
                }
                Strategy::Internal(_) => {
                    wallclock_profile(|| student_forward(&clip, &enc.student).map(drop), p.warmup, p.iters)?
                }
            }
        }
    };
    Ok(profile.median_ms)
}

/// Post-hoc grid for ratio `r`: temporal factor first (up to 4), the rest
/// split evenly over the two spatial axes.
fn posthoc_partition(t: usize, g: usize, r: usize) -> Result<BlockPartition> {
    let mut ft = 1;
    while ft < 4 && r % (ft * 2) == 0 && t % (ft * 2) == 0 {
        ft *= 2;
    }
    let spatial = r / ft;
    let fs = (spatial as f64).sqrt().round() as usize;
    if fs * fs != spatial || g % fs != 0 || t % ft != 0 {
        return Err(Error::Partition(format!(
            "cannot split ratio {r} over {t} frames of a {g}x{g} grid"
        )));
    }
    partition_blocks([t, g, g], [t / ft, g / fs, g / fs])
}

fn cmd_profile(config: &Path) -> Result<()> {
    let run = RunConfig::load(config)?;
    let p = &run.profile;
    let mut rows = profile_reports(&run)?;
    let mut header = CostReport::CSV_HEADER.to_string();
    if p.measure {
        header.push_str(",lat_vision_ms,lat_total_ms");
        let enc = match p.component {
            MeasureComponent::Stub => None,
            MeasureComponent::Encoder => {
                let teacher = load_teacher(&run.teacher)?;
                let student = init_student(&run, &teacher)?;
                Some(Encoders { teacher, student })
            }
        };
        for row in &mut rows {
            let vision_ms = measure_vision(&run, enc.as_ref(), row)?;
            // The LLM is not runnable here; its share is extrapolated at
            // the FLOP rate the encoder achieved.
            let vision_flops = (row.flops_vision + row.flops_auxiliary) as f64;
            let llm_ms = vision_ms * row.flops_llm_prefill as f64 / vision_flops;
            row.latency_vision_ms = Some(vision_ms);
            row.latency_total_ms = Some(vision_ms + llm_ms);
        }
    }
    let mut csv = header + "\n";
    for row in &rows {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    if let Some(path) = &p.out {
        write_file(path, &csv)?;
    }
    std::io::stdout()
        .write_all(csv.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}
