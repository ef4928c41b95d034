use std::ffi::{c_char, CStr, CString};
use std::ptr;
use vfpt::checkpoint::model_tensors;
use vfpt::data::Normalizer;
use vfpt::prompt::{PromptConfig, TunedModel};
use vfpt::selftest::{random_backbone, tiny_backbone_config};
use vfpt::spectral::{dft_naive, fourier2d_real, ComplexBuffer};
use vfpt::tensor::Tensor;
use vfpt_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { vfpt_last_error(buf.as_mut_ptr(), buf.len()) };
    if n == 0 {
        return String::new();
    }
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn fft_matches_core() {
    let re: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
    let im: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).cos()).collect();
    let (mut ore, mut oim) = (vec![0.0; 12], vec![0.0; 12]);
    let s = unsafe { vfpt_fft(re.as_ptr(), im.as_ptr(), 12, ore.as_mut_ptr(), oim.as_mut_ptr()) };
    assert_eq!(s, VfptStatus::Ok);
    let want = dft_naive(&ComplexBuffer::new(re.clone(), im.clone()).unwrap());
    let got = ComplexBuffer::new(ore.clone(), oim.clone()).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
    let (mut bre, mut bim) = (vec![0.0; 12], vec![0.0; 12]);
    let s = unsafe { vfpt_ifft(ore.as_ptr(), oim.as_ptr(), 12, bre.as_mut_ptr(), bim.as_mut_ptr()) };
    assert_eq!(s, VfptStatus::Ok);
    assert!(bre.iter().zip(&re).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn fourier_blocks() {
    let p = Tensor::from_fn(&[3, 5], |i| (i as f64).sqrt());
    let mut out = vec![0.0; 15];
    assert_eq!(
        unsafe { vfpt_fourier2d_real(p.data().as_ptr(), 3, 5, out.as_mut_ptr()) },
        VfptStatus::Ok
    );
    assert_eq!(out, fourier2d_real(&p).data());
    assert_eq!(
        unsafe { vfpt_fourier1d_real(p.data().as_ptr(), 3, 5, 7, out.as_mut_ptr()) },
        VfptStatus::InvalidArgument
    );
    assert!(last_error().contains("axis"));
}

#[test]
fn errors_are_reported() {
    let mut x = 0.0;
    let s = unsafe { vfpt_fft(ptr::null(), ptr::null(), 4, &mut x, &mut x) };
    assert_eq!(s, VfptStatus::NullPointer);
    assert!(!last_error().is_empty());
    let mut n = 0usize;
    assert_eq!(unsafe { vfpt_prompt_parameter_count(12, 10, 768, 1, &mut n) }, VfptStatus::Ok);
    assert_eq!(n, 92_160);
    assert_eq!(last_error(), "");
    assert_eq!(unsafe { vfpt_prompt_parameter_count(12, 10, 768, 0, &mut n) }, VfptStatus::Ok);
    assert_eq!(n, 7_680);
    let missing = CString::new("/nonexistent/x.vfpt").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { vfpt_checkpoint_load(missing.as_ptr(), &mut h) }, VfptStatus::Io);
    assert!(h.is_null());
}

#[test]
fn truncated_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.vfpt");
    std::fs::write(&path, b"VFPT\x01\x00").unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { vfpt_checkpoint_load(c.as_ptr(), &mut h) }, VfptStatus::Format);
    assert!(last_error().contains("byte 4"), "{}", last_error());
}

#[test]
fn model_and_checkpoint_handles() {
    let cfg = tiny_backbone_config();
    let bb = random_backbone(cfg.clone(), 3).unwrap();
    let pc = PromptConfig {
        length: 4,
        ..PromptConfig::default()
    };
    let model = TunedModel::new(bb, pc.clone(), 3, 1).unwrap();
    let norm = Normalizer {
        mean: vec![0.5],
        std: vec![0.25],
    };
    let dir = tempfile::tempdir().unwrap();
    let mpath = dir.path().join("model.vfpt");
    vfpt::io::save(&mpath, &model_tensors(&model, &norm)).unwrap();
    let mut rc = vfpt::config::RunConfig::default();
    rc.backbone = cfg.clone();
    rc.data = vfpt::data::TaskSpec {
        image_size: cfg.image_size,
        ..vfpt::data::TaskSpec::new(vfpt::data::TaskKind::SpatialLocation, 3, 0)
    };
    rc.pretrain.task.image_size = cfg.image_size;
    rc.pretrain.task.num_classes = cfg.num_classes_pretrain;
    rc.prompt = pc;
    let cpath = dir.path().join("config.toml");
    std::fs::write(&cpath, rc.to_toml()).unwrap();

    let (cs, ms) = (
        CString::new(cpath.to_str().unwrap()).unwrap(),
        CString::new(mpath.to_str().unwrap()).unwrap(),
    );
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { vfpt_model_load(cs.as_ptr(), ms.as_ptr(), &mut h) }, VfptStatus::Ok, "{}", last_error());
    let (mut c, mut s, mut k) = (0, 0, 0);
    assert_eq!(unsafe { vfpt_model_info(h, &mut c, &mut s, &mut k) }, VfptStatus::Ok);
    assert_eq!((c, s, k), (1, 8, 3));
    let raw: Vec<f64> = (0..2 * 64).map(|i| (i % 7) as f64 / 7.0).collect();
    let mut logits = vec![0.0; 6];
    assert_eq!(
        unsafe { vfpt_model_predict(h, raw.as_ptr(), 2, logits.as_mut_ptr(), 5) },
        VfptStatus::BufferTooSmall
    );
    assert_eq!(
        unsafe { vfpt_model_predict(h, raw.as_ptr(), 2, logits.as_mut_ptr(), 6) },
        VfptStatus::Ok
    );
    let imgs: Vec<Tensor> = raw
        .chunks(64)
        .map(|x| norm.normalize(&Tensor::new(vec![1, 8, 8], x.to_vec()).unwrap()).unwrap())
        .collect();
    let want = model.predict(&imgs.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(logits, want.data());
    unsafe { vfpt_model_free(h) };

    let mut ck = ptr::null_mut();
    assert_eq!(unsafe { vfpt_checkpoint_load(ms.as_ptr(), &mut ck) }, VfptStatus::Ok);
    let mut len = 0;
    assert_eq!(unsafe { vfpt_checkpoint_len(ck, &mut len) }, VfptStatus::Ok);
    let named = vfpt::io::load(&mpath).unwrap();
    assert_eq!(len, named.len());
    for (i, (name, t)) in named.iter().enumerate() {
        let mut need = 0;
        let mut tiny = [0 as c_char; 2];
        let st = unsafe { vfpt_checkpoint_name(ck, i, tiny.as_mut_ptr(), 2, &mut need) };
        assert_eq!(st, VfptStatus::BufferTooSmall);
        let mut buf = vec![0 as c_char; need];
        assert_eq!(unsafe { vfpt_checkpoint_name(ck, i, buf.as_mut_ptr(), need, &mut need) }, VfptStatus::Ok);
        assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), name);
        let mut dims = [0usize; 4];
        let mut rank = 0;
        assert_eq!(unsafe { vfpt_checkpoint_shape(ck, i, dims.as_mut_ptr(), 4, &mut rank) }, VfptStatus::Ok);
        assert_eq!(&dims[..rank], t.shape());
        let mut data = vec![0.0; t.numel()];
        assert_eq!(unsafe { vfpt_checkpoint_data(ck, i, data.as_mut_ptr(), data.len()) }, VfptStatus::Ok);
        assert_eq!(data, t.data());
    }
    let mut need = 0;
    assert_eq!(
        unsafe { vfpt_checkpoint_name(ck, len, ptr::null_mut(), 0, &mut need) },
        VfptStatus::InvalidArgument
    );
    unsafe { vfpt_checkpoint_free(ck) };
}

#[test]
fn selftest_and_version() {
    let mut failed = 99;
    assert_eq!(unsafe { vfpt_selftest(&mut failed) }, VfptStatus::Ok);
    assert_eq!(failed, 0);
    let v = unsafe { CStr::from_ptr(vfpt_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    assert_eq!(vfpt_cosine_lr(10, 100, 0.5, 10), 0.5);
}

#[test]
fn header_declares_every_export() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let src = std::fs::read_to_string(format!("{dir}/src/lib.rs")).unwrap();
    let header = std::fs::read_to_string(format!("{dir}/include/vfpt.h")).unwrap();
    let mut count = 0;
    for line in src.lines() {
        if let Some(rest) = line.split("extern \"C\" fn ").nth(1) {
            let name = rest.split('(').next().unwrap();
            assert!(header.contains(&format!("{name}(")), "{name} missing from header");
            count += 1;
        }
    }
    assert!(count >= 15, "{count}");
    for s in ["VFPT_STATUS_OK = 0", "typedef struct VfptModel VfptModel", "typedef struct VfptCheckpoint VfptCheckpoint"] {
        assert!(header.contains(s), "{s}");
    }
}
