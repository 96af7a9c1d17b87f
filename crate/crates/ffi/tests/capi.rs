use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use nhsg::config::PipelineConfig;
use nhsg::corpus::{toy_clips, ToyCorpusSpec, ToySource};
use nhsg::numerics::save_params;
use nhsg::pipeline::{embed_codebook, extractor};
use nhsg::representation::{extract_content_features, fit_kmeans, write_codebook};
use nhsg::stage2::Stage2Trainer;
use nhsg_ffi::*;

fn sine(f: f32, n: usize) -> Vec<f32> {
    (0..n).map(|i| 0.5 * (std::f32::consts::TAU * f * i as f32 / 16000.0).sin()).collect()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(nhsg_last_error()) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn f0_of_a_sine() {
    let x = sine(220.0, 16000);
    let mut buf = NhsgF32Buffer { data: ptr::null_mut(), len: 0 };
    let st = unsafe { nhsg_estimate_f0(x.as_ptr(), x.len(), 16000, &mut buf) };
    assert_eq!(st, NhsgStatus::Ok);
    assert_eq!(buf.len, 50);
    let f0 = unsafe { std::slice::from_raw_parts(buf.data, buf.len) };
    assert!(f0.iter().all(|&v| (v - 220.0).abs() < 5.0), "{f0:?}");
    unsafe { nhsg_buffer_free(buf) };
}

#[test]
fn errors_map_to_codes_and_messages() {
    let mut buf = NhsgF32Buffer { data: ptr::null_mut(), len: 0 };
    let x = sine(220.0, 100);
    assert_eq!(unsafe { nhsg_estimate_f0(x.as_ptr(), x.len(), 16000, &mut buf) }, NhsgStatus::TooShort);
    assert!(last_error().contains("too short"), "{}", last_error());
    assert_eq!(unsafe { nhsg_estimate_f0(ptr::null(), 10, 16000, &mut buf) }, NhsgStatus::NullPointer);
    let mut out = 0.0;
    let zeros = [0.0f32; 4];
    assert_eq!(unsafe { nhsg_cosine(zeros.as_ptr(), zeros.as_ptr(), 4, &mut out) }, NhsgStatus::InvalidEmbedding);
    let mut cb = ptr::null_mut();
    let missing = CString::new("/no/such/file.nhcb").unwrap();
    assert_eq!(unsafe { nhsg_codebook_load(missing.as_ptr(), &mut cb) }, NhsgStatus::Io);
    assert!(cb.is_null());
    assert_eq!(unsafe { nhsg_codebook_num_layers(cb) }, 0);
}

#[test]
fn metrics_identity() {
    let x = sine(330.0, 8000);
    let mut v = f64::NAN;
    unsafe {
        assert_eq!(nhsg_mcd(x.as_ptr(), x.len(), x.as_ptr(), x.len(), 16000, &mut v), NhsgStatus::Ok);
        assert_eq!(v, 0.0);
        let f0 = [0.0f32, 110.0, 220.0, 0.0];
        assert_eq!(nhsg_lf0_rmse(f0.as_ptr(), 4, f0.as_ptr(), 4, &mut v), NhsgStatus::Ok);
        assert_eq!(v, 0.0);
        assert_eq!(nhsg_vuv_error(f0.as_ptr(), 4, f0.as_ptr(), 4, &mut v), NhsgStatus::Ok);
        assert_eq!(v, 0.0);
        let silent = [0.0f32; 4];
        assert_eq!(nhsg_lf0_rmse(f0.as_ptr(), 4, silent.as_ptr(), 4, &mut v), NhsgStatus::Ok);
        assert!(v.is_nan());
        let mut e = vec![0.0f32; nhsg_embedding_dim()];
        assert_eq!(nhsg_embed_timbre(x.as_ptr(), x.len(), 16000, e.as_mut_ptr(), e.len()), NhsgStatus::Ok);
        assert_eq!(nhsg_cosine(e.as_ptr(), e.as_ptr(), e.len(), &mut v), NhsgStatus::Ok);
        assert_eq!(v, 1.0);
        assert_eq!(nhsg_embed_timbre(x.as_ptr(), x.len(), 16000, e.as_mut_ptr(), 3), NhsgStatus::InvalidArgument);
    }
}

#[test]
fn codebook_and_vocoder_handles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    std::fs::write(&cfg_path, "version = 1\n[representation]\nk = 8\n").unwrap();
    let cfg = PipelineConfig::load(&cfg_path).unwrap();
    let spec = ToyCorpusSpec {
        counts: vec![(ToySource::Human, 2)],
        ..ToyCorpusSpec::default()
    };
    let clips = toy_clips(&spec, cfg.stage1.phoneme_set.len()).unwrap();
    let fs = cfg.audio.frame_spec().unwrap();
    let feats: Vec<_> = clips.iter().map(|c| extract_content_features(&c.1, &fs, &extractor(&cfg)).unwrap()).collect();
    let cb = fit_kmeans(&feats, &[8; 4], 20, 1).unwrap();
    let cb_path = dir.path().join("cb.nhcb");
    write_codebook(&cb, &cb_path).unwrap();
    let t = Stage2Trainer::new(cfg.stage2.clone(), cb.layer_ids(), cb.vocab_sizes(), 16000, 3).unwrap();
    let mut store = t.checkpoint();
    embed_codebook(&mut store, &cb).unwrap();
    let ckpt = dir.path().join("voc.nhck");
    save_params(&store, &ckpt).unwrap();

    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(nhsg_codebook_load(cpath(&cb_path).as_ptr(), &mut h), NhsgStatus::Ok);
        assert_eq!(nhsg_codebook_num_layers(h), 4);
        let (mut id, mut k, mut d) = (0u32, 0usize, 0usize);
        assert_eq!(nhsg_codebook_layer_info(h, 2, &mut id, &mut k, &mut d), NhsgStatus::Ok);
        assert_eq!((id, k, d), (9, 8, cb.layers[2].dim));
        let c3 = cb.layers[2].centroid(3).to_vec();
        let mut idx = 99;
        assert_eq!(nhsg_codebook_nearest(h, 2, c3.as_ptr(), d, &mut idx), NhsgStatus::Ok);
        assert_eq!(idx, 3);
        assert_eq!(nhsg_codebook_nearest(h, 2, c3.as_ptr(), d - 1, &mut idx), NhsgStatus::Shape);
        assert_eq!(nhsg_codebook_layer_info(h, 9, &mut id, &mut k, &mut d), NhsgStatus::InvalidArgument);
        nhsg_codebook_free(h);

        let mut v = ptr::null_mut();
        assert_eq!(nhsg_vocoder_load(cpath(&ckpt).as_ptr(), cpath(&cfg_path).as_ptr(), &mut v), NhsgStatus::Ok);
        assert_eq!(nhsg_vocoder_hop(v), 320);
        assert_eq!(nhsg_vocoder_sample_rate(v), 16000);
        let src = &clips[0].1;
        let timbre = vec![0.1f32; nhsg_embedding_dim()];
        let mut out = NhsgF32Buffer { data: ptr::null_mut(), len: 0 };
        let st = nhsg_vocoder_convert(v, src.samples().as_ptr(), src.len(), 16000, timbre.as_ptr(), timbre.len(), &mut out);
        assert_eq!(st, NhsgStatus::Ok, "{}", last_error());
        assert_eq!(out.len, src.len().div_ceil(320) * 320);
        let y = std::slice::from_raw_parts(out.data, out.len);
        assert!(y.iter().all(|s| s.is_finite() && s.abs() < 1.0));
        nhsg_buffer_free(out);
        let mut out = NhsgF32Buffer { data: ptr::null_mut(), len: 0 };
        let st = nhsg_vocoder_convert(v, src.samples().as_ptr(), src.len(), 22050, timbre.as_ptr(), timbre.len(), &mut out);
        assert_eq!(st, NhsgStatus::Unsupported);
        nhsg_vocoder_free(v);
    }
}

fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_is_generated_and_c_program_links() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/nhsg.h")).unwrap();
    for f in ["nhsg_last_error", "nhsg_vocoder_convert", "nhsg_codebook_nearest", "NHSG_STATUS_OK", "typedef struct NhsgVocoder NhsgVocoder"] {
        assert!(header.contains(f), "header lacks {f}");
    }
    let lib = lib_dir().join("libnhsg_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("frames=50 f0[25]=220"), "{text}");
}
