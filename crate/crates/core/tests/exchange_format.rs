//! Contract with external producers of EUSG files: exact bytes for a known
//! head, flatten order of snapshot streams, and the zero-variance head that
//! carries pretrained weights.

use bayeshead::io::{decode_container, encode_container, ReadOptions};
use bayeshead::swag::{HeadLayout, SnapshotStream, SwagAccumulator, SwagConfig};
use bayeshead::GaussianHead;

fn push_entry(buf: &mut Vec<u8>, name: &str, dims: &[u64], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(1);
    buf.push(dims.len() as u8);
    dims.iter().for_each(|d| buf.extend_from_slice(&d.to_le_bytes()));
    data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
}

#[test]
fn two_by_three_head_bytes() {
    let head = GaussianHead::point(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![7.0, 8.0]).unwrap();
    let bytes = encode_container(&head.to_container().unwrap()).unwrap();

    let mut want = b"EUSG".to_vec();
    want.extend_from_slice(&1u32.to_le_bytes());
    want.extend_from_slice(&5u32.to_le_bytes());
    push_entry(&mut want, "mean_weight", &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    push_entry(&mut want, "mean_bias", &[2], &[7.0, 8.0]);
    push_entry(&mut want, "var_weight", &[2, 3], &[0.0; 6]);
    push_entry(&mut want, "var_bias", &[2], &[0.0; 2]);
    push_entry(&mut want, "noise", &[1], &[0.0]);
    assert_eq!(bytes, want);

    // Row 1 of the weights starts right after the 3 values of row 0.
    let row1 = 12 + 2 + 11 + 1 + 1 + 16 + 12;
    assert_eq!(&bytes[row1..row1 + 4], &4.0f32.to_le_bytes());
}

#[test]
fn snapshot_flatten_order_is_weights_then_biases() {
    let head = GaussianHead::point(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![7.0, 8.0]).unwrap();
    assert_eq!(head.flat_mean(), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);

    let layout = HeadLayout::of(&head);
    assert_eq!(layout.len(), 2 * 3 + 2);
    let mut stream = SnapshotStream::new(layout);
    stream.push(head.flat_mean()).unwrap();
    stream.push(head.flat_mean().iter().map(|v| v + 2.0).collect()).unwrap();
    assert!(stream.push(vec![0.0; 6]).is_err());

    let bytes = encode_container(&stream.to_container().unwrap()).unwrap();
    let back = SnapshotStream::from_container(&decode_container(&bytes, ReadOptions::default()).unwrap()).unwrap();
    assert_eq!(back.snapshots, stream.snapshots);

    let mut acc = SwagAccumulator::new(layout);
    acc.observe_stream(&back).unwrap();
    let post = acc.finalize(&head.flat_mean(), &SwagConfig::default()).unwrap();
    assert_eq!(post.mean_weight(), head.mean_weight());
    assert!(post.var_weight().iter().chain(post.var_bias()).all(|&v| v == 1.0));
}

#[test]
fn pretrained_head_round_trips_with_zero_variance() {
    let head = GaussianHead::point(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5], vec![0.1, 0.2, 0.3]).unwrap();
    let bytes = encode_container(&head.to_container().unwrap()).unwrap();
    let back = GaussianHead::from_container(&decode_container(&bytes, ReadOptions::default()).unwrap()).unwrap();
    assert_eq!(back, head);
    assert!(back.var_weight().iter().all(|&v| v == 0.0));
    assert_eq!(back.noise(), 0.0);
}
