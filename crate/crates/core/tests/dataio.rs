use std::path::Path;

use stssl_core::dataio::{
    container, extract_clip, generate_synthetic_dataset, load_dataset, AnnotationFile, AnnotationMode, FrameEntry,
    MixedBatchSampler, SamplerMode, SynthConfig, SynthLog, VideoStore, ANNOTATION_FILE, SYNTH_LOG_FILE,
};
use stssl_core::geometry::Region;
use stssl_core::Error;

fn cfg(n: usize, untrimmed: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        num_videos: n,
        classes: 2,
        frames_per_video: 16,
        untrimmed_fraction: untrimmed,
        seed,
        ..SynthConfig::default()
    }
}

fn edit_annotations(root: &Path, f: impl FnOnce(&mut AnnotationFile)) {
    let p = root.join(ANNOTATION_FILE);
    let mut file: AnnotationFile = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    f(&mut file);
    std::fs::write(&p, serde_json::to_string(&file).unwrap()).unwrap();
}

#[test]
fn four_video_root_loads() {
    let dir = tempfile::tempdir().unwrap();
    let generated = generate_synthetic_dataset(dir.path(), &cfg(4, 0.0, 7)).unwrap();
    let idx = load_dataset(dir.path()).unwrap();
    assert_eq!(idx.videos.len(), 4);
    assert_eq!(idx.class_count(), 2);
    assert_eq!(idx, generated);
    for a in idx.annotations.values() {
        assert!(a.trimmed);
        assert_eq!(a.frames.len(), 16);
    }
}

#[test]
fn write_then_load_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let idx = generate_synthetic_dataset(dir.path(), &cfg(5, 0.4, 3)).unwrap();
    let file: AnnotationFile =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(ANNOTATION_FILE)).unwrap()).unwrap();
    for rec in &file.videos {
        let a = &idx.annotations[&rec.id];
        assert_eq!(a.class_id, rec.class_id);
        assert_eq!(a.frames.len(), rec.frames.len());
        for (f, entry) in &rec.frames {
            let (FrameEntry::Box(b), Region::Box(r)) = (entry, &a.frames[f]) else {
                panic!("box mode expected");
            };
            assert_eq!(*b, [r.x1, r.y1, r.x2, r.y2]);
        }
        let px = container::read(&idx.container_path(&rec.id)).unwrap();
        let bytes = std::fs::read(idx.container_path(&rec.id)).unwrap();
        assert_eq!(container::encode(&px), bytes);
    }
}

#[test]
fn untrimmed_videos_match_action_log() {
    let dir = tempfile::tempdir().unwrap();
    let idx = generate_synthetic_dataset(dir.path(), &cfg(8, 0.5, 11)).unwrap();
    let log: SynthLog =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(SYNTH_LOG_FILE)).unwrap()).unwrap();
    assert_eq!(log.videos.iter().filter(|v| v.untrimmed).count(), 4);
    for v in &log.videos {
        let a = &idx.annotations[&v.id];
        assert_eq!(a.trimmed, !v.untrimmed);
        assert_eq!(a.frames.len(), v.action_end - v.action_start);
        if v.untrimmed {
            assert_eq!(16 - a.frames.len(), 4);
        }
        assert!(a.frames.keys().all(|f| (v.action_start..v.action_end).contains(f)));
    }
}

#[test]
fn inverted_box_names_video_and_frame() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(dir.path(), &cfg(4, 0.0, 1)).unwrap();
    edit_annotations(dir.path(), |f| {
        f.videos[2].frames.insert(5, FrameEntry::Box([20.0, 4.0, 10.0, 9.0]));
    });
    let err = load_dataset(dir.path()).unwrap_err();
    match &err {
        Error::Annotation { video_id, frame, .. } => {
            assert_eq!(video_id, "vid_0002");
            assert_eq!(*frame, Some(5));
        }
        other => panic!("unexpected error {other}"),
    }
    let msg = err.to_string();
    assert!(msg.contains("vid_0002") && msg.contains('5'), "{msg}");
}

#[test]
fn missing_container_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let idx = generate_synthetic_dataset(dir.path(), &cfg(4, 0.0, 1)).unwrap();
    std::fs::remove_file(idx.container_path("vid_0001")).unwrap();
    let msg = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("missing container"), "{msg}");
}

#[test]
fn duplicate_ids_and_bad_headers_fail() {
    let dir = tempfile::tempdir().unwrap();
    let idx = generate_synthetic_dataset(dir.path(), &cfg(4, 0.0, 1)).unwrap();
    edit_annotations(dir.path(), |f| {
        let dup = f.videos[0].clone();
        f.videos.push(dup);
    });
    assert!(matches!(load_dataset(dir.path()), Err(Error::DuplicateVideo(id)) if id == "vid_0000"));

    let dir2 = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(dir2.path(), &cfg(4, 0.0, 1)).unwrap();
    std::fs::write(dir2.path().join("videos/vid_0003.stv"), b"STV2garbage-garbage-").unwrap();
    let msg = load_dataset(dir2.path()).unwrap_err().to_string();
    assert!(msg.contains("vid_0003"), "{msg}");
    drop(idx);
}

#[test]
fn mask_mode_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(3, 0.0, 5);
    c.annotation_mode = AnnotationMode::Mask;
    let idx = generate_synthetic_dataset(dir.path(), &c).unwrap();
    assert_eq!(idx.annotation_mode, AnnotationMode::Mask);
    let a = &idx.annotations["vid_0000"];
    let Region::Mask(m) = &a.frames[&0] else {
        panic!("mask expected")
    };
    assert!(m.iter().any(|&v| v));
}

#[test]
fn sampler_draws_clips_with_targets() {
    let dir = tempfile::tempdir().unwrap();
    let idx = generate_synthetic_dataset(dir.path(), &cfg(10, 0.3, 2)).unwrap();
    let idx = stssl_core::dataio::split_labeled(&idx, 0.5, 0).unwrap();
    let store = VideoStore::load(&idx, idx.labeled_ids.iter().chain(&idx.unlabeled_ids)).unwrap();
    let mut s = MixedBatchSampler::new(&idx, SamplerMode::Semi, 4, 3)
        .unwrap()
        .with_clip_shape(8, 2, Some((32, 32)));
    let batch = s.next_batch(&idx, &store).unwrap();
    assert_eq!(batch.labeled().count(), 2);
    assert_eq!(batch.unlabeled().count(), 2);
    for (clip, t) in batch.labeled() {
        assert_eq!(clip.pixels.shape(), &[8, 32, 32, 3]);
        assert_eq!(t.loc.shape(), &[8, 32, 32]);
        assert_eq!(clip.frame_indices[1] - clip.frame_indices[0], 2);
    }
    let v = store.get(&idx.labeled_ids[0]).unwrap();
    assert!(extract_clip(v, 2, 8, 2, None).is_err());
}
