//! C ABI over the idf-slam core.
//!
//! Every fallible call returns an [`IdfStatus`]; on failure the message is
//! kept per thread and read with [`idf_last_error`]. Handles are opaque and
//! freed with their matching `_free` function. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufWriter;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use idf_slam::eval::{ate, extract_mesh, read_tum, write_tum};
use idf_slam::geometry::Vec3;
use idf_slam::{Frame, Intrinsics, Slam, SlamError, SystemConfig};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Initialization = 4,
    Load = 5,
    Io = 6,
    Metric = 7,
    Checkpoint = 8,
    TrackerLost = 9,
    Generation = 10,
    Contract = 11,
    Panic = 12,
}

/// Pinhole camera, pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct IdfIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// One RGB-D frame borrowed for the duration of a call.
///
/// `rgb` holds `width * height * 3` bytes, row-major; `depth` holds
/// `width * height` metres with 0 marking an invalid pixel.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct IdfFrame {
    pub timestamp: f64,
    pub intrinsics: IdfIntrinsics,
    pub rgb: *const u8,
    pub depth: *const f32,
}

/// Keyframe outcome of a processed frame.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdfKeyframe {
    None = 0,
    Inserted = 1,
    Culled = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct IdfFrameResult {
    /// Camera-to-world pose, row-major 4x4.
    pub pose: [f64; 16],
    pub residual: f64,
    pub lost: bool,
    pub keyframe: IdfKeyframe,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct IdfAte {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub pairs: u64,
}

/// Opaque tracking and mapping session.
pub struct IdfSlam {
    inner: Slam,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &SlamError) -> IdfStatus {
    match e {
        SlamError::Contract(_) => IdfStatus::Contract,
        SlamError::TrackerLost(_) => IdfStatus::TrackerLost,
        SlamError::Initialization(_) => IdfStatus::Initialization,
        SlamError::Metric(_) => IdfStatus::Metric,
        SlamError::Generation(_) => IdfStatus::Generation,
        SlamError::Load { .. } => IdfStatus::Load,
        SlamError::Checkpoint(_) => IdfStatus::Checkpoint,
        SlamError::Config(_) => IdfStatus::Config,
        SlamError::Io(_) => IdfStatus::Io,
    }
}

struct Fail(IdfStatus, String);

impl From<SlamError> for Fail {
    fn from(e: SlamError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail(IdfStatus::Io, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(IdfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(IdfStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any error or panic for [`idf_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IdfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IdfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            IdfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slam_mut<'a>(slam: *mut IdfSlam) -> Result<&'a mut IdfSlam, Fail> {
    slam.as_mut().ok_or_else(|| null("slam"))
}

unsafe fn slam_ref<'a>(slam: *const IdfSlam) -> Result<&'a IdfSlam, Fail> {
    slam.as_ref().ok_or_else(|| null("slam"))
}

unsafe fn to_frame(f: *const IdfFrame) -> Result<Frame, Fail> {
    let f = f.as_ref().ok_or_else(|| null("frame"))?;
    if f.rgb.is_null() || f.depth.is_null() {
        return Err(null("frame image"));
    }
    let k = f.intrinsics;
    let intrinsics = Intrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width as usize, k.height as usize)?;
    let n = k.width as usize * k.height as usize;
    let rgb = std::slice::from_raw_parts(f.rgb, 3 * n)
        .chunks_exact(3)
        .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
        .collect();
    let depth = std::slice::from_raw_parts(f.depth, n).to_vec();
    Ok(Frame::new(rgb, depth, intrinsics, f.timestamp)?)
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn idf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn idf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default configuration as TOML. Free with [`idf_string_free`].
#[no_mangle]
pub extern "C" fn idf_config_default_toml() -> *mut c_char {
    CString::new(SystemConfig::default().to_toml()).map_or(ptr::null_mut(), CString::into_raw)
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn idf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Starts a session from its first frame, which becomes the world origin.
/// `config_toml` may be NULL for the defaults; missing keys take defaults.
///
/// # Safety
/// `first` must point to a valid frame whose buffers match its size; `out`
/// must be writable. `config_toml`, when not NULL, must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn idf_slam_new(
    config_toml: *const c_char,
    first: *const IdfFrame,
    out: *mut *mut IdfSlam,
) -> IdfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let config = if config_toml.is_null() {
            SystemConfig::default()
        } else {
            SystemConfig::from_toml(str_arg(config_toml, "config")?)?
        };
        let inner = Slam::initialize(to_frame(first)?, config)?;
        *out = Box::into_raw(Box::new(IdfSlam { inner }));
        Ok(())
    })
}

/// # Safety
/// `slam` must come from [`idf_slam_new`] and not have been freed, or be NULL.
#[no_mangle]
pub unsafe extern "C" fn idf_slam_free(slam: *mut IdfSlam) {
    if !slam.is_null() {
        drop(Box::from_raw(slam));
    }
}

/// Tracks one frame and, when it becomes a keyframe, updates the map.
///
/// # Safety
/// Pointers as for [`idf_slam_new`]; `result` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn idf_slam_process_frame(
    slam: *mut IdfSlam,
    frame: *const IdfFrame,
    result: *mut IdfFrameResult,
) -> IdfStatus {
    guard(|| {
        let slam = slam_mut(slam)?;
        let r = slam.inner.process_frame(to_frame(frame)?)?;
        if let Some(out) = result.as_mut() {
            *out = IdfFrameResult {
                pose: r.pose.to_row_major(),
                residual: r.residual,
                lost: r.lost,
                keyframe: match r.keyframe {
                    None => IdfKeyframe::None,
                    Some(k) if k.culled => IdfKeyframe::Culled,
                    Some(_) => IdfKeyframe::Inserted,
                },
            };
        }
        Ok(())
    })
}

/// Number of poses estimated so far, the first frame included.
///
/// # Safety
/// `slam` must be a live handle or NULL (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn idf_slam_trajectory_len(slam: *const IdfSlam) -> usize {
    slam.as_ref().map_or(0, |s| s.inner.trajectory().len())
}

/// Timestamp and row-major camera-to-world pose of estimate `index`.
///
/// # Safety
/// `slam` must be a live handle; `timestamp` and `pose` writable (16 doubles).
#[no_mangle]
pub unsafe extern "C" fn idf_slam_pose(
    slam: *const IdfSlam,
    index: usize,
    timestamp: *mut f64,
    pose: *mut f64,
) -> IdfStatus {
    guard(|| {
        let slam = slam_ref(slam)?;
        if timestamp.is_null() || pose.is_null() {
            return Err(null("output"));
        }
        let traj = slam.inner.trajectory();
        let (t, p) = traj
            .get(index)
            .ok_or_else(|| invalid(format!("pose {index} of {}", traj.len())))?;
        *timestamp = *t;
        ptr::copy_nonoverlapping(p.to_row_major().as_ptr(), pose, 16);
        Ok(())
    })
}

/// Stored keyframes.
///
/// # Safety
/// `slam` must be a live handle or NULL (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn idf_slam_keyframe_count(slam: *const IdfSlam) -> usize {
    slam.as_ref().map_or(0, |s| s.inner.store().len())
}

/// Signed distance of `n` points (`xyz` packed) in the world frame.
///
/// # Safety
/// `points` must hold `3 * n` doubles and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn idf_slam_query_sdf(
    slam: *const IdfSlam,
    points: *const f64,
    n: usize,
    out: *mut f64,
) -> IdfStatus {
    guard(|| {
        let slam = slam_ref(slam)?;
        if n == 0 {
            return Ok(());
        }
        if points.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let pts: Vec<Vec3> = std::slice::from_raw_parts(points, 3 * n)
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0], c[1], c[2]))
            .collect();
        let sdf = slam.inner.map().sdf_batch(&pts)?;
        ptr::copy_nonoverlapping(sdf.as_ptr(), out, n);
        Ok(())
    })
}

/// Writes the trajectory as TUM text.
///
/// # Safety
/// `slam` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn idf_slam_write_trajectory(slam: *const IdfSlam, path: *const c_char) -> IdfStatus {
    guard(|| {
        let slam = slam_ref(slam)?;
        let file = File::create(str_arg(path, "path")?)?;
        write_tum(BufWriter::new(file), slam.inner.trajectory())?;
        Ok(())
    })
}

/// Extracts the map's zero level set over the configured bounds at grid
/// spacing `resolution` (metres) and writes it as ASCII PLY.
///
/// # Safety
/// `slam` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn idf_slam_write_mesh(
    slam: *const IdfSlam,
    path: *const c_char,
    resolution: f64,
) -> IdfStatus {
    guard(|| {
        let slam = slam_ref(slam)?;
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(invalid("resolution must be positive"));
        }
        let path = str_arg(path, "path")?;
        let mesh = extract_mesh(slam.inner.map(), &slam.inner.config().scene_bounds, resolution)?;
        mesh.write_ply(BufWriter::new(File::create(path)?))?;
        Ok(())
    })
}

/// Absolute trajectory error between two TUM files.
///
/// # Safety
/// Both paths must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn idf_ate_files(
    estimate: *const c_char,
    groundtruth: *const c_char,
    out: *mut IdfAte,
) -> IdfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let est = read_tum(str_arg(estimate, "estimate")?)?;
        let gt = read_tum(str_arg(groundtruth, "groundtruth")?)?;
        let s = ate(&est, &gt)?;
        *out = IdfAte {
            rmse: s.rmse,
            mean: s.mean,
            median: s.median,
            max: s.max,
            pairs: s.pairs as u64,
        };
        Ok(())
    })
}
