use neurocalc::data::idx::{idx_header, parse_idx, parse_idx_images, parse_idx_labels, IdxData};

fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b
}

fn train_images() -> Vec<u8> {
    let mut b = header(2051, &[60000, 28, 28]);
    b.resize(16 + 60000 * 784, 0);
    b
}

fn train_labels() -> Vec<u8> {
    let mut b = header(2049, &[60000]);
    b.extend((0..60000).map(|i| (i % 10) as u8));
    b
}

#[test]
fn full_size_headers_parse() {
    let images = train_images();
    assert_eq!(idx_header(&images).unwrap(), vec![2051, 60000, 28, 28]);
    let parsed = parse_idx_images(&images).unwrap();
    assert_eq!((parsed.count, parsed.rows, parsed.cols), (60000, 28, 28));
    let labels = train_labels();
    assert_eq!(idx_header(&labels).unwrap(), vec![2049, 60000]);
    assert_eq!(parse_idx_labels(&labels).unwrap().len(), 60000);
    assert!(matches!(parse_idx(&labels).unwrap(), IdxData::Labels(_)));
}

#[test]
fn corrupted_fixtures_are_rejected() {
    let images = train_images();
    let labels = train_labels();
    let mut wrong_magic = images.clone();
    wrong_magic[3] = 0x01;
    let mut short_count = images.clone();
    short_count[4..8].copy_from_slice(&59999u32.to_be_bytes());
    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("truncated payload", images[..images.len() - 1].to_vec()),
        ("trailing byte", [images.as_slice(), &[0]].concat()),
        ("labels magic on images", wrong_magic),
        ("count disagrees with payload", short_count),
        ("header only", images[..10].to_vec()),
        ("empty", Vec::new()),
    ];
    for (name, bytes) in cases {
        assert!(parse_idx_images(&bytes).is_err(), "{name}");
    }
    assert!(parse_idx_labels(&labels[..labels.len() - 3]).is_err());
    assert!(parse_idx_labels(&images).is_err());
    assert!(parse_idx(&header(0x0803_0000, &[1])).is_err());
}
