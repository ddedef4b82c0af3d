use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use idf_slam::eval::generate_synthetic;
use idf_slam::eval::synthetic::SyntheticScene;
use idf_slam::{Frame, Intrinsics, Slam, SystemConfig};
use idf_slam_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SMALL: &str = "init_map_iters = 3\n[mapper]\nrays_per_iter = 64\nsamples_per_ray = 16\nn_map_iters = 2\nn_pose_iters = 2\n";

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn bytes(f: &Frame) -> Vec<u8> {
    f.rgb.iter().flat_map(|c| c.map(|v| (v * 255.0).round() as u8)).collect()
}

fn c_frame(f: &Frame, rgb: &[u8]) -> IdfFrame {
    let k = f.intrinsics;
    IdfFrame {
        timestamp: f.timestamp,
        intrinsics: IdfIntrinsics {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width as u32,
            height: k.height as u32,
        },
        rgb: rgb.as_ptr(),
        depth: f.depth.as_ptr(),
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(manifest().join("include/idf_slam.h")).unwrap();
    let lib = std::fs::read_to_string(manifest().join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = lib
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 12);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct IdfSlam IdfSlam;"), "handle must stay opaque");
}

#[test]
fn session_through_the_abi_matches_the_library() {
    let k = Intrinsics::from_fov(32, 24, 60.0);
    let (frames, _) = generate_synthetic(&SyntheticScene::default(), 3, &k, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    // Colours are quantised to bytes on the way in; do the same for the reference.
    let frames: Vec<Frame> = frames
        .into_iter()
        .map(|mut f| {
            f.rgb.iter_mut().for_each(|c| *c = c.map(|v| (v * 255.0).round() / 255.0));
            f
        })
        .collect();
    let cfg = CString::new(SMALL).unwrap();
    let mut handle = ptr::null_mut();
    let rgb0 = bytes(&frames[0]);
    assert_eq!(unsafe { idf_slam_new(cfg.as_ptr(), &c_frame(&frames[0], &rgb0), &mut handle) }, IdfStatus::Ok);
    let mut direct = Slam::initialize(frames[0].clone(), SystemConfig::from_toml(SMALL).unwrap()).unwrap();
    for f in &frames[1..] {
        let rgb = bytes(f);
        let mut r = IdfFrameResult {
            pose: [0.0; 16],
            residual: 0.0,
            lost: false,
            keyframe: IdfKeyframe::None,
        };
        assert_eq!(unsafe { idf_slam_process_frame(handle, &c_frame(f, &rgb), &mut r) }, IdfStatus::Ok);
        let d = direct.process_frame(f.clone()).unwrap();
        assert_eq!(r.pose, d.pose.to_row_major());
        assert_eq!(r.lost, d.lost);
    }
    assert_eq!(unsafe { idf_slam_trajectory_len(handle) }, 3);
    let (mut t, mut pose) = (0.0, [0.0; 16]);
    assert_eq!(unsafe { idf_slam_pose(handle, 2, &mut t, pose.as_mut_ptr()) }, IdfStatus::Ok);
    assert_eq!(t, frames[2].timestamp);
    assert_eq!(unsafe { idf_slam_pose(handle, 3, &mut t, pose.as_mut_ptr()) }, IdfStatus::InvalidArgument);

    let pts = [0.0, 0.0, 1.0, 0.5, -0.2, 2.0];
    let mut sdf = [0.0; 2];
    assert_eq!(unsafe { idf_slam_query_sdf(handle, pts.as_ptr(), 2, sdf.as_mut_ptr()) }, IdfStatus::Ok);
    let expect = direct.map().sdf_batch(&[[0.0, 0.0, 1.0].into(), [0.5, -0.2, 2.0].into()]).unwrap();
    assert_eq!(sdf.to_vec(), expect);

    let dir = tempfile::tempdir().unwrap();
    let traj = CString::new(dir.path().join("t.txt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { idf_slam_write_trajectory(handle, traj.as_ptr()) }, IdfStatus::Ok);
    let mut ate = IdfAte::default();
    assert_eq!(unsafe { idf_ate_files(traj.as_ptr(), traj.as_ptr(), &mut ate) }, IdfStatus::Ok);
    assert_eq!(ate.pairs, 3);
    assert!(ate.rmse < 1e-6);
    unsafe { idf_slam_free(handle) };
}

#[test]
fn invalid_frames_are_rejected_with_a_message() {
    let k = Intrinsics::from_fov(8, 6, 60.0);
    let rgb = vec![0u8; 8 * 6 * 3];
    let depth = vec![-1.0f32; 8 * 6];
    let f = Frame::new(vec![[0.0; 3]; 48], vec![0.0; 48], k, 0.0).unwrap();
    let mut frame = c_frame(&f, &rgb);
    frame.depth = depth.as_ptr();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { idf_slam_new(ptr::null(), &frame, &mut handle) }, IdfStatus::Contract);
    assert!(handle.is_null());
    let msg = unsafe { CStr::from_ptr(idf_last_error()) }.to_str().unwrap();
    assert!(msg.contains("depth"), "{msg}");
    frame.intrinsics.fx = -1.0;
    assert_eq!(unsafe { idf_slam_new(ptr::null(), &frame, &mut handle) }, IdfStatus::Contract);
    let bad = CString::new("n_rep = \"ten\"").unwrap();
    assert_eq!(unsafe { idf_slam_new(bad.as_ptr(), &frame, &mut handle) }, IdfStatus::Config);
}

fn static_lib() -> Option<PathBuf> {
    let deps = std::env::current_exe().ok()?.parent()?.to_path_buf();
    [deps.parent()?.to_path_buf(), deps]
        .iter()
        .filter_map(|d| std::fs::read_dir(d).ok())
        .flatten()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("libidf_slam_ffi") && name.ends_with(".a")
        })
        .max_by_key(|p| p.metadata().and_then(|m| m.modified()).ok())
}

fn compiler() -> Option<&'static str> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
}

#[test]
fn c_program_builds_against_the_header() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    let include = manifest().join("include");
    let src = manifest().join("tests/c/smoke.c");
    let check = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(check.status.success(), "{}", String::from_utf8_lossy(&check.stderr));

    let Some(lib) = static_lib() else {
        eprintln!("static library not found next to the test binary; link step skipped");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let link = Command::new(cc)
        .args(["-std=c99", "-O1", "-I"])
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(link.status.success(), "{}", String::from_utf8_lossy(&link.stderr));
    let run = Command::new(Path::new(&exe)).output().unwrap();
    assert!(
        run.status.success(),
        "exit {:?}: {}{}",
        run.status.code(),
        String::from_utf8_lossy(&run.stdout),
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
