use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use mmdflow_ffi::*;

fn last_error() -> String {
    let p = mmdflow_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn cloud(points: &[f64], dim: usize) -> *mut MmdflowCloud {
    let mut out = ptr::null_mut();
    let st = mmdflow_cloud_new(points.as_ptr(), points.len() / dim, dim, &mut out);
    assert_eq!(st, MmdflowStatus::Ok);
    out
}

unsafe fn points(c: *const MmdflowCloud) -> Vec<f64> {
    let (mut n, mut d) = (0, 0);
    assert_eq!(mmdflow_cloud_shape(c, &mut n, &mut d), MmdflowStatus::Ok);
    let mut v = vec![0.0; n * d];
    assert_eq!(mmdflow_cloud_points(c, v.as_mut_ptr(), v.len()), MmdflowStatus::Ok);
    v
}

#[test]
fn toy_flow_round_trip() {
    unsafe {
        let spec = CString::new(r#"{"kind": "affine", "dim": 1}"#).unwrap();
        let mut map = ptr::null_mut();
        assert_eq!(mmdflow_map_from_json(spec.as_ptr(), &mut map), MmdflowStatus::Ok);
        let (mut d, mut dphi) = (0, 0);
        assert_eq!(mmdflow_map_dims(map, &mut d, &mut dphi), MmdflowStatus::Ok);
        assert_eq!((d, dphi), (1, 1));

        let q = cloud(&[0.0], 1);
        let p = cloud(&[1.0], 1);
        let mut mmd = 0.0;
        assert_eq!(mmdflow_mmd_squared(q, p, map, &mut mmd), MmdflowStatus::Ok);
        assert_eq!(mmd, 1.0);

        let mut flow = ptr::null_mut();
        let mut ratio = f64::NAN;
        let st = mmdflow_flow_build(q, p, map, MMDFLOW_SCHEDULE_SECOND_ORDER, 1e-3, 1.0, 1e-12, &mut flow, &mut ratio);
        assert_eq!(st, MmdflowStatus::Ok);
        let mut len = 0;
        assert_eq!(mmdflow_flow_len(flow, &mut len), MmdflowStatus::Ok);
        assert_eq!(len, 5);
        assert_eq!(ratio, 0.25f64.powi(5));

        let mut pushed = ptr::null_mut();
        assert_eq!(mmdflow_flow_push(flow, q, &mut pushed), MmdflowStatus::Ok);
        assert!((points(pushed)[0] - (1.0 - 0.5f64.powi(5))).abs() < 1e-15);
        let mut back = ptr::null_mut();
        assert_eq!(mmdflow_flow_invert(flow, pushed, 1e-13, 60, &mut back), MmdflowStatus::Ok);
        assert!(points(back)[0].abs() < 1e-12);

        let mut json = ptr::null_mut();
        assert_eq!(mmdflow_flow_to_json(flow, &mut json), MmdflowStatus::Ok);
        let mut reloaded = ptr::null_mut();
        assert_eq!(mmdflow_flow_from_json(json, &mut reloaded), MmdflowStatus::Ok);
        let mut json2 = ptr::null_mut();
        assert_eq!(mmdflow_flow_to_json(reloaded, &mut json2), MmdflowStatus::Ok);
        assert_eq!(CStr::from_ptr(json), CStr::from_ptr(json2));

        mmdflow_string_free(json);
        mmdflow_string_free(json2);
        mmdflow_flow_free(reloaded);
        mmdflow_flow_free(flow);
        mmdflow_cloud_free(back);
        mmdflow_cloud_free(pushed);
        mmdflow_cloud_free(q);
        mmdflow_cloud_free(p);
        mmdflow_map_free(map);
    }
}

#[test]
fn first_order_schedule_meets_target() {
    unsafe {
        let spec = CString::new(r#"{"kind": "bounded_sine", "alpha": 0.5, "w": [[1.0, -0.5], [0.3, 0.8]]}"#).unwrap();
        let mut map = ptr::null_mut();
        assert_eq!(mmdflow_map_from_json(spec.as_ptr(), &mut map), MmdflowStatus::Ok);
        let mut phi = [0.0; 4];
        assert_eq!(mmdflow_map_eval(map, [0.0, 0.0].as_ptr(), 2, phi.as_mut_ptr(), 4), MmdflowStatus::Ok);
        assert_eq!(phi, [0.0; 4]);
        let q = cloud(&[0.0, 0.0, 0.2, -0.1, -0.3, 0.1], 2);
        let p = cloud(&[0.5, 0.2, 0.7, 0.1, 0.4, 0.5], 2);
        let mut flow = ptr::null_mut();
        let mut ratio = 0.0;
        let st = mmdflow_flow_build(q, p, map, MMDFLOW_SCHEDULE_FIRST_ORDER, 0.1, 1.0, 1e-12, &mut flow, &mut ratio);
        assert_eq!(st, MmdflowStatus::Ok, "{}", last_error());
        assert!(ratio <= 0.1);
        mmdflow_flow_free(flow);
        mmdflow_cloud_free(q);
        mmdflow_cloud_free(p);
        mmdflow_map_free(map);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut map = ptr::null_mut();
        assert_eq!(mmdflow_map_from_json(ptr::null(), &mut map), MmdflowStatus::NullPointer);
        assert!(last_error().contains("json"));

        let bad = CString::new(r#"{"kind": "affine", "dim": 1, "bogus": 1}"#).unwrap();
        assert_eq!(mmdflow_map_from_json(bad.as_ptr(), &mut map), MmdflowStatus::Json);
        assert!(map.is_null());

        let good = CString::new(r#"{"kind": "affine", "dim": 2}"#).unwrap();
        assert_eq!(mmdflow_map_from_json(good.as_ptr(), &mut map), MmdflowStatus::Ok);
        let mut out = [0.0; 2];
        let st = mmdflow_map_eval(map, [1.0].as_ptr(), 1, out.as_mut_ptr(), 2);
        assert_eq!(st, MmdflowStatus::DimensionMismatch);

        let q = cloud(&[0.0, 0.0], 2);
        let p = cloud(&[1.0, 1.0], 2);
        let mut flow = ptr::null_mut();
        let st = mmdflow_flow_build(q, p, map, 7, 0.1, 1.0, 0.0, &mut flow, ptr::null_mut());
        assert_eq!(st, MmdflowStatus::InvalidArgument);
        let st = mmdflow_flow_build(q, p, map, MMDFLOW_SCHEDULE_SECOND_ORDER, 2.0, 1.0, 0.0, &mut flow, ptr::null_mut());
        assert_eq!(st, MmdflowStatus::Config);
        assert!(flow.is_null());

        let mut c = ptr::null_mut();
        assert_eq!(mmdflow_cloud_new([f64::NAN].as_ptr(), 1, 1, &mut c), MmdflowStatus::InvalidArgument);
        let json = CString::new("{\"format\": \"other\", \"maps\": [], \"blocks\": []}").unwrap();
        let mut f = ptr::null_mut();
        assert_eq!(mmdflow_flow_from_json(json.as_ptr(), &mut f), MmdflowStatus::InvalidArgument);

        mmdflow_map_free(ptr::null_mut());
        mmdflow_cloud_free(ptr::null_mut());
        mmdflow_flow_free(ptr::null_mut());
        mmdflow_string_free(ptr::null_mut());
        mmdflow_cloud_free(q);
        mmdflow_cloud_free(p);
        mmdflow_map_free(map);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/mmdflow.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("check.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ MmdflowStatus s = MMDFLOW_STATUS_OK; MmdflowMap *m = 0; \
             (void)mmdflow_map_free; (void)m; return (int)s + MMDFLOW_SCHEDULE_FIRST_ORDER; }}\n"
        ),
    )
    .unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&src)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "header failed to compile"),
        Err(e) => eprintln!("skipping: no C compiler ({e})"),
    }
}
