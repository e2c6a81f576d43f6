use std::fs;
use std::path::Path;

use idd_core::checkpoint::load_checkpoint;
use idd_core::config::TrainConfig;
use idd_core::distributions::add_noise;
use idd_core::train::{evaluate_texture_differentiation, load_image_dir};
use idd_core::{
    derive_seed, load_image, save_image, smooth, synth, Branch, Error, Generator,
    GuidedFilterParams, Image, NoiseSpec, Result,
};

use crate::{BranchArg, FilterArgs, InputMode};

/// Width of the mid-gray gap between compare panels.
pub const SEPARATOR_PX: usize = 2;
const SEPARATOR_VALUE: f64 = 0.5;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Version { .. } => 2,
        Error::Dataset(_) => 3,
        Error::Numeric { .. } => 4,
        Error::NotFound(_)
        | Error::Decode { .. }
        | Error::Io { .. }
        | Error::Range(_)
        | Error::Shape(_) => 5,
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_generator(path: &Path) -> Result<Generator> {
    let (params, config) = load_checkpoint(path)?;
    Generator::new(config, params)
}

fn filter_params(args: FilterArgs, img: &Image) -> Result<GuidedFilterParams> {
    let auto = GuidedFilterParams::for_size(img.height(), img.width());
    GuidedFilterParams::new(
        args.radius.unwrap_or(auto.radius),
        args.eps.unwrap_or(auto.eps),
    )
}

fn noise(sigma: f64) -> Result<NoiseSpec> {
    let spec = NoiseSpec { mean: 0.0, sigma };
    spec.validate()?;
    Ok(spec)
}

fn model_input(
    content: &Image,
    mode: InputMode,
    sigma: f64,
    seed: u64,
    filter: FilterArgs,
) -> Result<Image> {
    match mode {
        InputMode::Raw => Ok(content.clone()),
        InputMode::Smooth => smooth(content, &filter_params(filter, content)?),
        InputMode::SmoothNoise => {
            let smoothed = smooth(content, &filter_params(filter, content)?)?;
            add_noise(&smoothed, &noise(sigma)?, derive_seed(seed, 0, 0))
        }
    }
}

pub fn train(config: &Path, overrides: &[String], resume: Option<&Path>) -> Result<()> {
    let config = TrainConfig::load(config, overrides)?;
    config.validate()?;
    let outcome = idd_core::train(&config, resume)?;
    if let Some(r) = outcome.last_report {
        log::info!("final loss {:.6}", r.total);
    }
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn stylize(
    checkpoint: &Path,
    content: &Path,
    branch: BranchArg,
    mode: InputMode,
    sigma: f64,
    seed: u64,
    filter: FilterArgs,
    out: &Path,
) -> Result<()> {
    let generator = load_generator(checkpoint)?;
    let content = load_image(content)?;
    if mode != InputMode::SmoothNoise && sigma != 0.1 {
        log::warn!("--sigma is ignored unless --input-mode smooth_noise");
    }
    let input = model_input(&content, mode, sigma, seed, filter)?;
    let branch = match branch {
        BranchArg::Color => Branch::Color,
        BranchArg::Texture => Branch::Texture,
    };
    let result = generator.forward_branch(&input, branch)?.clamped();
    save_image(&result, out)?;
    println!("{}", out.display());
    Ok(())
}

/// Lays images of equal size side by side with mid-gray separators.
pub fn hstack(panels: &[Image]) -> Result<Image> {
    let first = panels
        .first()
        .ok_or_else(|| Error::Argument("no panels to stack".into()))?;
    if panels.iter().any(|p| !p.same_dims(first)) {
        return Err(Error::Shape("compare panels differ in size".into()));
    }
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let total_w = panels.len() * w + (panels.len() - 1) * SEPARATOR_PX;
    let mut grid = Image::filled(h, total_w, c, SEPARATOR_VALUE)?;
    for (i, p) in panels.iter().enumerate() {
        let x0 = i * (w + SEPARATOR_PX);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    grid.set(ch, y, x0 + x, p.get(ch, y, x));
                }
            }
        }
    }
    Ok(grid)
}

pub fn compare(
    checkpoint: &Path,
    content: &Path,
    sigma: f64,
    seed: u64,
    filter: FilterArgs,
    out: &Path,
) -> Result<()> {
    let generator = load_generator(checkpoint)?;
    let content = load_image(content)?;
    let smooth_in = model_input(&content, InputMode::Smooth, sigma, seed, filter)?;
    let noisy_in = model_input(&content, InputMode::SmoothNoise, sigma, seed, filter)?;
    let panels = [
        content.clone(),
        generator.forward_branch(&content, Branch::Texture)?,
        generator.forward_color(&smooth_in)?,
        generator.forward_color(&noisy_in)?,
    ];
    let grid = hstack(&panels.map(|p| p.clamped()))?;
    save_image(&grid, out)?;
    println!("{}", out.display());
    Ok(())
}

pub fn metrics(
    checkpoint: &Path,
    eval_dir: &Path,
    sigma: f64,
    seed: u64,
    filter: FilterArgs,
    out: &Path,
) -> Result<()> {
    let generator = load_generator(checkpoint)?;
    let images = load_image_dir(eval_dir)?;
    let fixed = match (filter.radius, filter.eps) {
        (None, None) => None,
        (r, e) => Some(GuidedFilterParams::new(
            r.unwrap_or(2),
            e.unwrap_or(idd_core::guided_filter::DEFAULT_EPS),
        )?),
    };
    let report =
        evaluate_texture_differentiation(&generator, &images, fixed, &noise(sigma)?, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(out, report.to_text()).map_err(|e| io_err(out, e))?;
    println!("{:.6}", report.ratio);
    Ok(())
}

pub fn filter(input: &Path, radius: usize, eps: f64, out: &Path) -> Result<()> {
    let params = GuidedFilterParams::new(radius, eps)?;
    let img = load_image(input)?;
    save_image(&smooth(&img, &params)?, out)?;
    println!("{}", out.display());
    Ok(())
}

pub fn features(
    checkpoint: &Path,
    content: &Path,
    mode: InputMode,
    sigma: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let generator = load_generator(checkpoint)?;
    let content = load_image(content)?;
    let input = model_input(
        &content,
        mode,
        sigma,
        seed,
        FilterArgs {
            radius: None,
            eps: None,
        },
    )?;
    for p in generator.dump_feature_maps(&input, out)? {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn synth_data(out: &Path, train: usize, eval: usize, size: usize, seed: u64) -> Result<()> {
    if train == 0 || size < 16 {
        return Err(Error::Argument(
            "need at least one training image of side >= 16".into(),
        ));
    }
    let data = synth::write_demo_data(out, train, eval, size, seed)?;
    println!("{}", data.content_dir.display());
    println!("{}", data.eval_dir.display());
    println!("{}", data.style_image.display());
    Ok(())
}
