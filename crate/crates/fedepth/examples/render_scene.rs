//! Renders a synthetic driving scene and reports what came out: sample
//! counts per drive, the depth range of the first frame, and a PNG of its
//! target image next to a shaded depth map.

use fedepth::data::{drive_histogram, generate_synthetic_scene, SceneSpec};
use image::{Rgb, RgbImage};

fn main() -> fedepth::Result<()> {
    let spec = SceneSpec {
        width: 128,
        height: 64,
        drives: 3,
        frames_per_drive: 8,
        boxes: 4,
        ..SceneSpec::default()
    };
    let samples = generate_synthetic_scene::<f32>(&spec, 7)?;

    println!("{} samples", samples.len());
    for (drive, count) in drive_histogram(&samples) {
        println!("  {drive}: {count}");
    }

    let sample = &samples[0];
    let gt = sample.ground_truth.as_ref().expect("rendered scenes carry true depth");
    let (lo, hi) = gt.iter().fold((f32::MAX, f32::MIN), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    println!("frame 0 depth range: {lo:.2} m to {hi:.2} m");
    println!("{} source frames, true poses known: {}", sample.sources.len(), sample.true_poses.is_some());

    let out = std::env::temp_dir().join("fedepth-render");
    std::fs::create_dir_all(&out)?;

    let (h, w) = (sample.target.height(), sample.target.width());
    let mut side_by_side = RgbImage::new(w as u32 * 2, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (sample.target.data()[[y, x, 0]] * 255.0) as u8,
                (sample.target.data()[[y, x, 1]] * 255.0) as u8,
                (sample.target.data()[[y, x, 2]] * 255.0) as u8,
            ];
            side_by_side.put_pixel(x as u32, y as u32, Rgb(px));
            // Near is bright, far is dark.
            let shade = (255.0 * (1.0 - (gt[[y, x]] - lo) / (hi - lo))) as u8;
            side_by_side.put_pixel((w + x) as u32, y as u32, Rgb([shade, shade, shade]));
        }
    }
    let path = out.join("frame0.png");
    side_by_side.save(&path).map_err(|e| fedepth::Error::invalid(e.to_string()))?;
    println!("wrote {}", path.display());
    Ok(())
}
