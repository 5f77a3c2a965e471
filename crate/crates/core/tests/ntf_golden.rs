use std::path::{Path, PathBuf};

use asymaudit::net::{build_model, ModelConfig};
use asymaudit::surgery::{
    edit_first_conv, first_conv_channels_equal, kernel_from_export, Base, InitStrategy, KernelSource, ResamplePolicy,
};
use asymaudit::{ntf_read, DType, Tensor, TensorData};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn assert_reencodes(path: &Path, t: &Tensor) {
    assert_eq!(t.to_ntf_bytes(), std::fs::read(path).unwrap(), "{}", path.display());
}

#[test]
fn golden_f32() {
    let p = data("f32_2x3.ntf");
    let t = ntf_read(&p).unwrap();
    assert_eq!(t.shape(), &[2, 3]);
    assert_eq!(t.dtype(), DType::F32);
    let v = t.as_f32().unwrap();
    assert_eq!(&v[..5], &[0.0, -1.5, 2.25, 1e-3, f32::MAX]);
    assert!(v[5] == 0.0 && v[5].is_sign_negative());
    assert_reencodes(&p, &t);
}

#[test]
fn golden_f64_is_30_bytes() {
    let p = data("f64_1x1.ntf");
    assert_eq!(std::fs::metadata(&p).unwrap().len(), 30);
    let t = ntf_read(&p).unwrap();
    assert_eq!(t.data(), &TensorData::F64(vec![0.1]));
    assert_reencodes(&p, &t);
}

#[test]
fn golden_u8() {
    let p = data("u8_2x2x2.ntf");
    let t = ntf_read(&p).unwrap();
    assert_eq!(t.shape(), &[2, 2, 2]);
    assert_eq!(t.data(), &TensorData::U8(vec![0, 1, 2, 127, 128, 200, 254, 255]));
    assert_reencodes(&p, &t);
}

fn exported_value(o: usize, c: usize, i: usize, j: usize) -> f32 {
    (o * 1000 + c * 100 + i * 10 + j) as f32 / 4096.0
}

#[test]
fn export_manifest_kernel_reads_value_exactly() {
    let k = kernel_from_export(&data("export/manifest.json"), None).unwrap();
    assert_eq!(k.shape(), &[4, 3, 7, 7]);
    let v = k.as_f32().unwrap();
    for o in 0..4 {
        for c in 0..3 {
            for i in 0..7 {
                for j in 0..7 {
                    assert_eq!(v[((o * 3 + c) * 7 + i) * 7 + j], exported_value(o, c, i, j));
                }
            }
        }
    }
    assert!(kernel_from_export(&data("export/manifest.json"), Some("fc.weight")).is_err());
}

#[test]
fn uniform_green_from_export_manifest() {
    let m = build_model(&ModelConfig {
        widths: vec![4, 8],
        ..Default::default()
    })
    .unwrap();
    let s = InitStrategy::UniformChannel {
        channel: 1,
        base: Base::Source(KernelSource::Path(data("export/manifest.json"))),
    };
    let out = edit_first_conv(&m, &s, 0, ResamplePolicy::CenterCrop, false).unwrap();
    assert!(first_conv_channels_equal(&out));
    let p = out.first_conv();
    for o in 0..4 {
        for c in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(p.weight[((o * 3 + c) * 3 + i) * 3 + j], exported_value(o, 1, i + 2, j + 2));
                }
            }
        }
    }
    assert_eq!(out.params()[1..], m.params()[1..]);
}
