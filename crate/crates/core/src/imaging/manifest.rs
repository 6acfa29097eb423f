//! Focal-stack manifest: a small UTF-8 key/value format.
//!
//! ```text
//! # comments run to end of line
//! all_in_focus = aif.png
//! max_depth_m = 10
//! ground_truth = depth.dpt
//! camera { focal_mm = 35, f_number = 2.8, pixel_mm = 0.0056, scale = 5, kernel = 7 }
//! loss { alpha = 0.85, lambda_smooth = 0.001 }
//! slice { path = slice_00.png, focus_m = 2 }
//! slice { path = slice_01.png, focus_m = 8 }
//! ```
//!
//! Block entries are separated by commas or newlines. Values containing
//! whitespace, `,`, `{`, `}`, `=` or `#` must be double-quoted. Relative paths
//! resolve against the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use super::io::{load_depth, load_image, save_depth, save_image_16};
use super::{FocalStack, FocusSlice};
use crate::error::{Error, Result};
use crate::optics::CameraIntrinsics;
use crate::scalar::Real;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ManifestBlock {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

impl ManifestBlock {
    pub fn new(name: impl Into<String>) -> Self {
        ManifestBlock {
            name: name.into(),
            entries: Vec::new(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> std::result::Result<Option<f64>, String> {
        self.get(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| format!("{}.{key}: expected a number, got {v:?}", self.name))
            })
            .transpose()
    }

    pub fn require_f64(&self, key: &str) -> std::result::Result<f64, String> {
        self.get_f64(key)?
            .ok_or_else(|| format!("{}: missing field {key}", self.name))
    }
}

/// Parsed manifest: top-level `key = value` pairs plus named blocks in file
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub fields: ManifestBlock,
    pub blocks: Vec<ManifestBlock>,
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Word(String),
    Eq,
    Open,
    Close,
    Sep,
}

fn tokenize(text: &str) -> std::result::Result<Vec<(Token, usize)>, String> {
    let mut tokens = Vec::new();
    let mut chars = text.chars().peekable();
    let mut line = 1;
    while let Some(&ch) = chars.peek() {
        match ch {
            '\n' => {
                chars.next();
                tokens.push((Token::Sep, line));
                line += 1;
            }
            c if c.is_whitespace() => {
                chars.next();
            }
            '#' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    chars.next();
                }
            }
            ',' | ';' => {
                chars.next();
                tokens.push((Token::Sep, line));
            }
            '=' => {
                chars.next();
                tokens.push((Token::Eq, line));
            }
            '{' => {
                chars.next();
                tokens.push((Token::Open, line));
            }
            '}' => {
                chars.next();
                tokens.push((Token::Close, line));
            }
            '"' => {
                chars.next();
                let mut word = String::new();
                loop {
                    match chars.next() {
                        Some('"') => break,
                        Some('\\') => match chars.next() {
                            Some(c) => word.push(c),
                            None => return Err(format!("line {line}: unterminated string")),
                        },
                        Some('\n') | None => return Err(format!("line {line}: unterminated string")),
                        Some(c) => word.push(c),
                    }
                }
                tokens.push((Token::Word(word), line));
            }
            _ => {
                let mut word = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_whitespace() || matches!(c, ',' | ';' | '=' | '{' | '}' | '#' | '"') {
                        break;
                    }
                    word.push(c);
                    chars.next();
                }
                tokens.push((Token::Word(word), line));
            }
        }
    }
    Ok(tokens)
}

impl Manifest {
    pub fn parse(text: &str) -> std::result::Result<Manifest, String> {
        let tokens = tokenize(text)?;
        let mut manifest = Manifest::default();
        let mut current: Option<ManifestBlock> = None;
        let mut i = 0;
        while i < tokens.len() {
            let (tok, line) = &tokens[i];
            match tok {
                Token::Sep => i += 1,
                Token::Close => {
                    let block = current
                        .take()
                        .ok_or_else(|| format!("line {line}: unmatched '}}'"))?;
                    manifest.blocks.push(block);
                    i += 1;
                }
                Token::Word(key) => match tokens.get(i + 1).map(|t| &t.0) {
                    Some(Token::Eq) => {
                        let value = match tokens.get(i + 2) {
                            Some((Token::Word(v), _)) => v.clone(),
                            _ => return Err(format!("line {line}: missing value for {key}")),
                        };
                        let target = current.as_mut().unwrap_or(&mut manifest.fields);
                        target.entries.push((key.clone(), value));
                        i += 3;
                    }
                    Some(Token::Open) => {
                        if current.is_some() {
                            return Err(format!("line {line}: nested blocks are not allowed"));
                        }
                        current = Some(ManifestBlock::new(key.clone()));
                        i += 2;
                    }
                    _ => return Err(format!("line {line}: expected '=' or '{{' after {key}")),
                },
                Token::Eq | Token::Open => return Err(format!("line {line}: unexpected token")),
            }
        }
        if let Some(b) = current {
            return Err(format!("unterminated block {}", b.name));
        }
        Ok(manifest)
    }

    pub fn block(&self, name: &str) -> Option<&ManifestBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn blocks_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ManifestBlock> + 'a {
        self.blocks.iter().filter(move |b| b.name == name)
    }
}

fn quote(v: &str) -> String {
    let plain = !v.is_empty()
        && !v
            .chars()
            .any(|c| c.is_whitespace() || matches!(c, ',' | ';' | '=' | '{' | '}' | '#' | '"' | '\\'));
    if plain {
        v.to_string()
    } else {
        format!("\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\""))
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.fields.entries {
            writeln!(f, "{k} = {}", quote(v))?;
        }
        for b in &self.blocks {
            let body: Vec<String> = b
                .entries
                .iter()
                .map(|(k, v)| format!("{k} = {}", quote(v)))
                .collect();
            writeln!(f, "{} {{ {} }}", b.name, body.join(", "))?;
        }
        Ok(())
    }
}

/// Builds a camera from a `camera { ... }` block. `focus_m` may come from the
/// block or be supplied by the caller; the caller's value wins.
pub(crate) fn camera_from_block<T: Real>(
    block: &ManifestBlock,
    focus_m: Option<f64>,
) -> std::result::Result<CameraIntrinsics<T>, String> {
    let focal = block.require_f64("focal_mm")?;
    let n = block.require_f64("f_number")?;
    let scale = block.require_f64("scale")?;
    let focus = match focus_m {
        Some(f) => f,
        None => block.require_f64("focus_m")?,
    };
    let mut cam = CameraIntrinsics::new(T::lit(focal), T::lit(n), T::lit(focus), T::lit(scale))
        .map_err(|e| e.to_string())?;
    if let Some(p) = block.get_f64("pixel_mm")? {
        cam = cam.with_pixel_size_mm(T::lit(p)).map_err(|e| e.to_string())?;
    }
    if let Some(k) = block.get("kernel") {
        let k: usize = k
            .parse()
            .map_err(|_| format!("camera.kernel: expected an odd integer, got {k:?}"))?;
        cam = cam.with_kernel_size(k).map_err(|e| e.to_string())?;
    }
    Ok(cam)
}

pub(crate) fn camera_block<T: Real>(cam: &CameraIntrinsics<T>, with_focus: bool) -> ManifestBlock {
    let mut b = ManifestBlock::new("camera")
        .with("focal_mm", cam.focal_length_mm())
        .with("f_number", cam.f_number());
    if with_focus {
        b = b.with("focus_m", cam.focus_distance_m());
    }
    b.with("pixel_mm", cam.pixel_size_mm())
        .with("scale", cam.output_scale())
        .with("kernel", cam.kernel_size())
}

/// Reads a camera configuration: a file holding a `camera { ... }` block.
/// `focus_m`, when given, replaces any focus distance in the file.
pub fn load_camera_config<T: Real>(path: impl AsRef<Path>, focus_m: Option<f64>) -> Result<CameraIntrinsics<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = Manifest::parse(&text).map_err(|m| Error::format(path, m))?;
    let block = manifest
        .block("camera")
        .ok_or_else(|| Error::format(path, "missing camera block"))?;
    camera_from_block(block, focus_m).map_err(|m| Error::format(path, m))
}

/// Writes a camera configuration readable by [`load_camera_config`].
pub fn save_camera_config<T: Real>(cam: &CameraIntrinsics<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let manifest = Manifest {
        fields: ManifestBlock::new(""),
        blocks: vec![camera_block(cam, true)],
    };
    fs::write(path, manifest.to_string()).map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads and validates a focal stack from its manifest.
pub fn load_stack_manifest<T: Real>(path: impl AsRef<Path>) -> Result<FocalStack<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = Manifest::parse(&text).map_err(|m| Error::format(path, m))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let bad = |m: String| Error::format(path, m);

    let aif_path = manifest
        .fields
        .get("all_in_focus")
        .ok_or_else(|| bad("missing field all_in_focus".into()))?;
    let max_depth = manifest.fields.require_f64("max_depth_m").map_err(bad)?;
    let camera_block = manifest
        .block("camera")
        .ok_or_else(|| bad("missing camera block".into()))?;

    let mut slices = Vec::new();
    for block in manifest.blocks_named("slice") {
        let p = block
            .get("path")
            .ok_or_else(|| bad("slice: missing field path".into()))?;
        let focus = block.require_f64("focus_m").map_err(bad)?;
        slices.push(FocusSlice {
            image: load_image(resolve(base, p))?,
            focus_distance_m: T::lit(focus),
        });
    }
    // The camera block carries no focus of its own; borrow the first slice's
    // (or any valid value) so the lens parameters validate.
    let focus = slices
        .first()
        .map(|s| s.focus_distance_m.to_f64_lossy())
        .or(camera_block.get_f64("focus_m").map_err(bad)?)
        .unwrap_or(max_depth);
    let camera = camera_from_block(camera_block, Some(focus)).map_err(bad)?;

    let all_in_focus = load_image(resolve(base, aif_path))?;
    let ground_truth = match manifest.fields.get("ground_truth") {
        Some(p) => Some(load_depth(resolve(base, p))?),
        None => None,
    };
    FocalStack::new(all_in_focus, slices, camera, T::lit(max_depth), ground_truth)
}

/// Writes the stack as 16-bit PNGs, a `.dpt` ground truth (if any) and a
/// manifest named `stack.txt` inside `dir`. Returns the manifest path.
pub fn save_stack<T: Real>(stack: &FocalStack<T>, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    save_image_16(stack.all_in_focus(), dir.join("all_in_focus.png"))?;
    manifest.fields = ManifestBlock::new("")
        .with("all_in_focus", "all_in_focus.png")
        .with("max_depth_m", stack.max_depth_m());
    if let Some(gt) = stack.ground_truth_depth() {
        save_depth(gt, dir.join("ground_truth.dpt"))?;
        manifest.fields.entries.push(("ground_truth".into(), "ground_truth.dpt".into()));
    }
    manifest.blocks.push(camera_block(stack.camera(), false));
    for (i, s) in stack.slices().iter().enumerate() {
        let name = format!("slice_{i:02}.png");
        save_image_16(&s.image, dir.join(&name))?;
        manifest
            .blocks
            .push(ManifestBlock::new("slice").with("path", name).with("focus_m", s.focus_distance_m));
    }
    let path = dir.join("stack.txt");
    fs::write(&path, manifest.to_string()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{quantize, BitDepth, DepthMap, Image};

    const SAMPLE: &str = r#"
# two slices of an 80 m scene
all_in_focus = aif.png
max_depth_m = 80
camera {
  focal_mm = 35, f_number = 2.8
  pixel_mm = 0.0056
  scale = 2, kernel = 7
}
slice { path = "s 0.png", focus_m = 16 }
slice { path = s1.png, focus_m = 64 }
"#;

    #[test]
    fn parses_fields_and_blocks() {
        let m = Manifest::parse(SAMPLE).unwrap();
        assert_eq!(m.fields.get("all_in_focus"), Some("aif.png"));
        assert_eq!(m.fields.get_f64("max_depth_m").unwrap(), Some(80.0));
        let cam = m.block("camera").unwrap();
        assert_eq!(cam.get("kernel"), Some("7"));
        let slices: Vec<_> = m.blocks_named("slice").collect();
        assert_eq!(slices.len(), 2);
        assert_eq!(slices[0].get("path"), Some("s 0.png"));
        assert_eq!(Manifest::parse(&m.to_string()).unwrap(), m);
    }

    #[test]
    fn rejects_malformed_text() {
        assert!(Manifest::parse("camera { focal_mm = 35").is_err());
        assert!(Manifest::parse("a = ").is_err());
        assert!(Manifest::parse("}").is_err());
        assert!(Manifest::parse("a { b { } }").is_err());
        assert!(Manifest::parse("path = \"open").is_err());
    }

    fn write_fixture(dir: &Path, slice_dims: (usize, usize), focus: [f64; 2]) -> PathBuf {
        let aif = Image::filled(12, 12, 3, 0.25).unwrap();
        crate::imaging::save_image(&aif, dir.join("aif.png")).unwrap();
        let s = Image::filled(slice_dims.0, slice_dims.1, 3, 0.25).unwrap();
        crate::imaging::save_image(&s, dir.join("s 0.png")).unwrap();
        crate::imaging::save_image(&aif, dir.join("s1.png")).unwrap();
        let text = SAMPLE
            .replace("focus_m = 16", &format!("focus_m = {}", focus[0]))
            .replace("focus_m = 64", &format!("focus_m = {}", focus[1]));
        let p = dir.join("m.txt");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_two_slice_stack() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(dir.path(), (12, 12), [16.0, 64.0]);
        let stack: FocalStack<f64> = load_stack_manifest(&p).unwrap();
        assert_eq!(stack.len(), 2);
        let focus: Vec<f64> = stack.slices().iter().map(|s| s.focus_distance_m).collect();
        assert_eq!(focus, vec![16.0, 64.0]);
        assert_eq!(stack.camera().output_scale(), 2.0);
    }

    #[test]
    fn dimension_mismatch_and_duplicates_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(dir.path(), (10, 10), [16.0, 64.0]);
        let err = load_stack_manifest::<f64>(&p).unwrap_err().to_string();
        assert!(err.contains("dimension mismatch"), "{err}");

        let p = write_fixture(dir.path(), (12, 12), [16.0, 16.0]);
        let err = load_stack_manifest::<f64>(&p).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");

        let p = write_fixture(dir.path(), (12, 12), [0.02, 16.0]);
        assert!(load_stack_manifest::<f64>(&p).is_err());
    }

    #[test]
    fn saved_stack_reloads_at_stored_precision() {
        let dir = tempfile::tempdir().unwrap();
        let aif = Image::from_fn(6, 5, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.3).unwrap();
        let slice = aif.map(|v| v * 0.9 + 0.01).unwrap();
        let gt = DepthMap::from_fn(6, 5, |y, x| 1.0 + (y * 5 + x) as f64 / 7.0).unwrap();
        let cam = CameraIntrinsics::new(35.0, 2.8, 2.0, 5.0).unwrap();
        let stack = FocalStack::new(
            aif.clone(),
            vec![FocusSlice { image: slice.clone(), focus_distance_m: 2.0 }],
            cam,
            10.0,
            Some(gt.clone()),
        )
        .unwrap();
        let p = save_stack(&stack, dir.path()).unwrap();
        let back: FocalStack<f64> = load_stack_manifest(&p).unwrap();
        assert_eq!(back.all_in_focus(), &quantize(&aif, BitDepth::Sixteen));
        assert_eq!(back.slices()[0].image, quantize(&slice, BitDepth::Sixteen));
        assert_eq!(back.ground_truth_depth(), Some(&gt));
        assert_eq!(back.camera(), stack.camera());

        // a second cycle is the identity
        let p2 = save_stack(&back, dir.path().join("again")).unwrap();
        assert_eq!(load_stack_manifest::<f64>(&p2).unwrap(), back);
    }
}
