use facerep::graph::{builtin, parse_descriptor, topo_order, with_fnl, NetworkDescriptor, BUILTIN_NAMES};
use facerep::Error;
use proptest::prelude::*;

#[derive(Clone, Debug)]
enum Step {
    Conv { n: usize, k3: bool, relu: bool },
    Pool { max: bool },
    Relu,
    Lrn,
    Fnl,
    Dropout,
    Diamond { n: usize },
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        (1usize..6, any::<bool>(), any::<bool>()).prop_map(|(n, k3, relu)| Step::Conv { n, k3, relu }),
        any::<bool>().prop_map(|max| Step::Pool { max }),
        Just(Step::Relu),
        Just(Step::Lrn),
        Just(Step::Fnl),
        Just(Step::Dropout),
        (1usize..4).prop_map(|n| Step::Diamond { n }),
    ]
}

fn render(steps: &[Step], fc: usize, shuffle: &[usize]) -> String {
    let mut lines = vec!["layer data input shape=2,8,8 out=data".to_string()];
    let mut prev = "data".to_string();
    let mut side = 8;
    for (i, s) in steps.iter().enumerate() {
        let name = format!("l{i}");
        match s {
            Step::Conv { n, k3, relu } => {
                let (k, pad) = if *k3 { (3, 1) } else { (1, 0) };
                lines.push(format!("layer {name} conv num_output={n} kernel={k} pad={pad} relu={relu} in={prev} out={name}"));
            }
            Step::Pool { max } => {
                if side < 4 {
                    continue;
                }
                side /= 2;
                let kind = if *max { "pool_max" } else { "pool_mean" };
                lines.push(format!("layer {name} {kind} kernel=2 stride=2 in={prev} out={name}"));
            }
            Step::Relu => lines.push(format!("layer {name} relu in={prev} out={name}")),
            Step::Lrn => lines.push(format!("layer {name} lrn local_size=3 alpha=0.001 beta=0.75 k=2 in={prev} out={name}")),
            Step::Fnl => lines.push(format!("layer {name} fnl in={prev} out={name}")),
            Step::Dropout => lines.push(format!("layer {name} dropout ratio=0.25 in={prev} out={name}")),
            Step::Diamond { n } => {
                lines.push(format!("layer {name}a conv num_output={n} kernel=1 in={prev} out={name}a"));
                lines.push(format!("layer {name}b conv num_output={n} kernel=3 pad=1 in={prev} out={name}b"));
                lines.push(format!("layer {name} sum in={name}a,{name}b out={name}"));
            }
        }
        prev = name;
    }
    lines.push(format!("layer flat flatten in={prev} out=flat"));
    lines.push(format!("layer fc fc num_output={fc} in=flat out=fc"));
    let mut order: Vec<usize> = (0..lines.len()).collect();
    for (i, &j) in shuffle.iter().enumerate() {
        let a = i % order.len();
        let b = j % order.len();
        order.swap(a, b);
    }
    let mut text = String::from("# random\n");
    for i in order {
        text.push_str(&lines[i]);
        text.push('\n');
    }
    text.push_str("feature fc\n");
    text
}

fn respects_dependencies(d: &NetworkDescriptor) -> bool {
    let order = topo_order(d).unwrap();
    let mut pos = vec![0; d.layers.len()];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    d.layers.iter().enumerate().all(|(i, l)| {
        l.inputs.iter().all(|e| {
            let j = d.layers.iter().position(|m| m.outputs.contains(e)).unwrap();
            pos[j] < pos[i]
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn parse_serialize_parse(steps in prop::collection::vec(step(), 0..8), fc in 1usize..20,
                             shuffle in prop::collection::vec(any::<usize>(), 0..12)) {
        let text = render(&steps, fc, &shuffle);
        let d = parse_descriptor(&text).unwrap();
        let again = parse_descriptor(&d.to_text()).unwrap();
        prop_assert_eq!(&d, &again);
        prop_assert_eq!(d.edge_shapes().unwrap(), again.edge_shapes().unwrap());
        prop_assert!(respects_dependencies(&d));
        let shapes = d.edge_shapes().unwrap();
        prop_assert_eq!(shapes["fc"].dims(), &[fc]);
    }
}

#[test]
fn builtins_round_trip() {
    for name in BUILTIN_NAMES {
        let d = builtin(name).unwrap();
        assert_eq!(parse_descriptor(&d.to_text()).unwrap(), d, "{name}");
        let f = with_fnl(&d).unwrap();
        assert_eq!(parse_descriptor(&f.to_text()).unwrap(), f, "{name} with fnl");
        assert!(respects_dependencies(&f));
    }
}

#[test]
fn cycle_is_rejected() {
    let text = "layer data input shape=1,4,4 out=data\n\
                layer a sum in=data,c out=a\n\
                layer b relu in=a out=b\n\
                layer c relu in=b out=c\n";
    assert!(matches!(parse_descriptor(text), Err(Error::Cycle(_))));
}
