use proptest::prelude::*;

use super::*;

fn track(id: u32, n: usize, side: f64) -> IdentityTrack {
    IdentityTrack {
        identity_id: id,
        faces: (0..n)
            .map(|i| FaceRecord {
                frame_index: 2 * i as u64 + u64::from(id),
                bbox: [0.0, 0.0, side, side],
                frame_size: [100, 100],
                embedding: vec![],
                feature_ref: format!("id{id}#{i}"),
            })
            .collect(),
    }
}

fn video(tracks: Vec<IdentityTrack>) -> VideoRecord {
    VideoRecord {
        video_id: "vid".into(),
        label: Some(Label::Fake),
        manipulated_identity: None,
        category: None,
        tracks,
    }
}

#[test]
fn sort_examples() {
    let tracks = vec![track(0, 3, 20.0), track(1, 7, 30.0)];
    let ids = |v: Vec<&IdentityTrack>| v.iter().map(|t| t.identity_id).collect::<Vec<_>>();
    assert_eq!(ids(sort_identities(&tracks, SortPolicy::SizeBased, 0)), [1, 0]);
    assert_eq!(ids(sort_identities(&tracks, SortPolicy::FrequencyBased, 0)), [1, 0]);
    let equal = vec![track(3, 2, 10.0), track(1, 2, 10.0), track(2, 2, 10.0)];
    assert_eq!(ids(sort_identities(&equal, SortPolicy::SizeBased, 0)), [1, 2, 3]);
    assert_eq!(ids(sort_identities(&equal, SortPolicy::FrequencyBased, 0)), [1, 2, 3]);
    let mut r = ids(sort_identities(&equal, SortPolicy::Random, 9));
    assert_eq!(r, ids(sort_identities(&equal, SortPolicy::Random, 9)));
    r.sort();
    assert_eq!(r, [1, 2, 3]);
}

#[test]
fn allocation_examples() {
    assert_eq!(allocate_slots(&[20], 16, Some(2)), [16]);
    assert_eq!(allocate_slots(&[8, 8], 16, Some(2)), [8, 8]);
    assert_eq!(allocate_slots(&[3, 30], 16, Some(2)), [3, 13]);
    assert_eq!(allocate_slots(&[30, 3], 16, Some(2)), [13, 3]);
    assert_eq!(allocate_slots(&[9, 9, 9], 16, None), [6, 5, 5]);
    assert_eq!(allocate_slots(&[9, 9, 9], 16, Some(2)), [8, 8]);
    assert_eq!(allocate_slots(&[2, 2], 16, Some(2)), [2, 2]);
}

#[test]
fn sampling_examples() {
    assert_eq!(sample_indices(16, 16, 0.0), (0..16).collect::<Vec<_>>());
    assert_eq!(sample_indices(32, 16, 0.0), (0..16).map(|j| 2 * j).collect::<Vec<_>>());
    assert_eq!(sample_indices(5, 8, 0.0), [0, 1, 2, 3, 4]);
    assert_eq!(sample_indices(32, 16, 0.5), (0..16).map(|j| 2 * j + 1).collect::<Vec<_>>());
    assert!(sample_indices(10, 0, 0.3).is_empty());
}

#[test]
fn later_epochs_shift_the_selection() {
    let t = track(0, 50, 10.0);
    let first: Vec<u64> = uniform_sample(&t, 16, 4, 0).iter().map(|f| f.frame_index).collect();
    assert_eq!(first, sample_indices(50, 16, 0.0).iter().map(|&i| 2 * i as u64).collect::<Vec<_>>());
    let differing = (1..10)
        .filter(|&e| uniform_sample(&t, 16, 4, e).iter().map(|f| f.frame_index).collect::<Vec<_>>() != first)
        .count();
    assert!(differing > 0);
}

#[test]
fn assemble_examples() {
    let cfg = AssemblyConfig::default();
    let s = assemble(&video(vec![track(0, 10, 10.0)]), &cfg, 0).unwrap();
    assert_eq!(s.valid_count(), 10);
    assert!(s.slots[10..].iter().all(|x| x.is_none()));

    let s = assemble(&video(vec![track(0, 3, 30.0), track(1, 30, 10.0)]), &cfg, 0).unwrap();
    assert_eq!(s.valid_count(), 16);
    let n0 = s.slots.iter().flatten().filter(|f| f.identity_id == 0).count();
    assert_eq!(n0, 3);
    assert_eq!(s.identities(), [0, 1]);

    let s = assemble(&video(vec![track(0, 8, 30.0), track(1, 8, 20.0), track(2, 8, 10.0)]), &cfg, 0).unwrap();
    assert_eq!(s.identities(), [0, 1]);

    let full = AssemblyConfig { max_identities: None, ..cfg.clone() };
    let s = assemble(&video(vec![track(0, 8, 30.0), track(1, 8, 20.0), track(2, 8, 10.0)]), &full, 0).unwrap();
    assert_eq!(s.identities(), [0, 1, 2]);

    assert!(matches!(assemble(&video(vec![]), &cfg, 0), Err(AssemblyError::NoFaces(_))));
    let bad = AssemblyConfig { sequence_length: 0, ..cfg.clone() };
    assert!(assemble(&video(vec![track(0, 1, 1.0)]), &bad, 0).is_err());
    let bad = AssemblyConfig { max_identities: Some(0), ..cfg };
    assert!(assemble(&video(vec![track(0, 1, 1.0)]), &bad, 0).is_err());
}

#[test]
fn size_bins_follow_area_ratio() {
    // 40x40 in 100x100 is 16%
    let s = assemble(&video(vec![track(0, 2, 40.0)]), &AssemblyConfig::default(), 0).unwrap();
    assert_eq!(s.slots[0].as_ref().unwrap().size_bin, 3);
}

#[test]
fn sequence_file_round_trip() {
    let cfg = AssemblyConfig::default();
    let mut seqs = vec![
        assemble(&video(vec![track(0, 5, 30.0), track(1, 30, 10.0)]), &cfg, 0).unwrap(),
        assemble(&video(vec![track(4, 2, 50.0)]), &cfg, 0).unwrap(),
    ];
    seqs[1].label = None;
    let file = SequenceFile { sequence_length: 16, source: "crops".into(), sequences: seqs };
    let mut buf = Vec::new();
    write_sequences(&mut buf, &file).unwrap();
    assert_eq!(&buf[..4], b"MNTS");
    assert_eq!(read_sequences(&mut buf.as_slice()).unwrap(), file);
    assert!(read_sequences(&mut &buf[..buf.len() - 1]).is_err());
    assert!(read_sequences(&mut &b"XXXX"[..]).is_err());
}

/// Direct statement of the allocation rule, one slot at a time: grant slots
/// round-robin in rank order, skipping identities that ran out of faces.
fn allocation_oracle(avail: &[usize], n: usize) -> Vec<usize> {
    let mut q = vec![0; avail.len()];
    let mut left = n;
    while left > 0 && q.iter().zip(avail).any(|(a, b)| a < b) {
        for i in 0..avail.len() {
            if left > 0 && q[i] < avail[i] {
                q[i] += 1;
                left -= 1;
            }
        }
    }
    q
}

proptest! {
    #[test]
    fn allocation_invariants(avail in proptest::collection::vec(0usize..40, 1..6), n in 1usize..40, m in 1usize..6) {
        let q = allocate_slots(&avail, n, Some(m));
        let k = avail.len().min(m);
        prop_assert_eq!(q.len(), k);
        let total: usize = avail[..k].iter().sum();
        prop_assert_eq!(q.iter().sum::<usize>(), n.min(total));
        for i in 0..k {
            prop_assert!(q[i] <= avail[i]);
        }
        // totals agree with the one-slot-at-a-time oracle
        prop_assert_eq!(allocation_oracle(&avail[..k], n).iter().sum::<usize>(), q.iter().sum::<usize>());
    }

    #[test]
    fn assembly_invariants(
        sizes in proptest::collection::vec((1usize..25, 1.0f64..100.0), 1..5),
        n in 1usize..24,
        policy in prop_oneof![Just(SortPolicy::SizeBased), Just(SortPolicy::FrequencyBased), Just(SortPolicy::Random)],
        epoch in 0u64..4,
    ) {
        let v = video(sizes.iter().enumerate().map(|(i, &(c, s))| track(i as u32, c, s)).collect());
        let cfg = AssemblyConfig { sequence_length: n, max_identities: None, sorting: policy, seed: 11 };
        let s = assemble(&v, &cfg, epoch).unwrap();
        prop_assert_eq!(s.slots.len(), n);
        prop_assert_eq!(s.valid_count(), n.min(v.face_count()));
        prop_assert_eq!(&s, &assemble(&v, &cfg, epoch).unwrap());
        for id in s.identities() {
            let frames: Vec<u64> = s.slots.iter().flatten().filter(|f| f.identity_id == id).map(|f| f.frame_index).collect();
            prop_assert!(frames.windows(2).all(|w| w[0] < w[1]));
            let t = v.track(id).unwrap();
            for f in &frames {
                prop_assert!(t.faces.iter().any(|x| x.frame_index == *f));
            }
        }
        // padding only at the tail
        let first_pad = s.slots.iter().position(|x| x.is_none()).unwrap_or(n);
        prop_assert!(s.slots[first_pad..].iter().all(|x| x.is_none()));
    }
}
