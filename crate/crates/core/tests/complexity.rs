use extremec3::complexity::*;
use extremec3::network::{ExtremeC3Net, NetworkSpec};
use extremec3::tensor::Shape;

fn report(h: usize, w: usize) -> CostReport {
    let net = ExtremeC3Net::build(&NetworkSpec::default(), 0).unwrap();
    count_flops(net.graph(), Shape::new(1, 3, h, w).unwrap()).unwrap()
}

#[test]
fn csv_round_trips_to_the_same_totals() {
    let r = report(224, 224);
    let text = report_table(&r, TableFormat::Csv, None);
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["layer", "op", "out_n", "out_c", "out_h", "out_w", "params", "flops_all", "flops_conv_bn"]);

    let (mut p, mut a, mut c) = (0u64, 0u64, 0u64);
    let mut total = None;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let nums: Vec<u64> = (6..9).map(|i| rec[i].parse().unwrap()).collect();
        if &rec[0] == "total" {
            total = Some(nums);
            continue;
        }
        p += nums[0];
        a += nums[1];
        c += nums[2];
    }
    assert_eq!(total.unwrap(), vec![p, a, c]);
    assert_eq!((p, a, c), (r.params, r.flops_all, r.flops_conv_bn));
}

#[test]
fn mode_relationships() {
    let r = report(224, 224);
    assert!(r.flops_conv_bn <= r.flops_all);
    for l in &r.layers {
        if !l.counted_in_conv_bn {
            assert_eq!(l.flops_conv_bn, 0, "{}", l.name);
        }
        assert!(l.flops_conv_bn <= l.flops_all, "{}", l.name);
    }
    assert_eq!(r.flops(CountMode::All), r.flops_all);
    assert_eq!(r.layer("coarse.up4").unwrap().flops_all, 18_816);
}

#[test]
fn text_table_mentions_the_reference() {
    let r = report(224, 224);
    let text = report_table(&r, TableFormat::Text, Some(&PUBLISHED));
    assert!(text.contains("reference 37.7K"));
    assert!(text.contains("params (exact) 45870"));
    assert!(!report_table(&r, TableFormat::Text, None).contains("reference"));
}

#[test]
fn params_do_not_depend_on_resolution() {
    let (a, b) = (report(224, 224), report(112, 160));
    assert_eq!(a.params, b.params);
    assert!(b.flops_all < a.flops_all);
}
