use docseg::config::{apply_overrides, parse_document, parse_override, resolve_interpolations, to_canonical_string, ConfigNode, Providers, Value};
use proptest::prelude::*;

fn scalar() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::Int),
        any::<f64>().prop_filter("nan never equals itself", |f| !f.is_nan()).prop_map(Value::Float),
        "[ -~\\n\\té]{0,10}".prop_filter("no tokens", |s| !s.contains("${")).prop_map(Value::Str),
    ]
}

fn key() -> impl Strategy<Value = String> {
    prop_oneof![4 => "[a-z_][a-z0-9_-]{0,6}", 1 => "[ -~]{1,6}"]
}

fn value() -> impl Strategy<Value = Value> {
    scalar().prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::List),
            prop::collection::btree_map(key(), inner, 0..4).prop_map(|m| Value::Map(m.into_iter().collect())),
        ]
    })
}

fn tree() -> impl Strategy<Value = ConfigNode> {
    prop::collection::btree_map(key(), value(), 0..5).prop_map(|m| m.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn canonical_text_reparses_to_the_same_tree(t in tree()) {
        let text = to_canonical_string(&t);
        let back = parse_document(&text, "canonical").map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(to_canonical_string(&back), text);
    }

    #[test]
    fn resolution_without_tokens_is_identity(t in tree()) {
        let r = resolve_interpolations(&t, &Providers::new()).unwrap();
        prop_assert_eq!(r.node(), &t);
    }

    #[test]
    fn later_overrides_win(a in -1000i64..1000, b in -1000i64..1000) {
        let base = parse_document("trainer:\n  max_epochs: 50\n", "b").unwrap();
        let d1 = parse_override(&format!("trainer.max_epochs={a}")).unwrap();
        let d2 = parse_override(&format!("trainer.max_epochs={b}")).unwrap();
        let both = apply_overrides(&base, &[d1.clone(), d2.clone()]).unwrap();
        let stepwise = apply_overrides(&apply_overrides(&base, &[d1]).unwrap(), &[d2]).unwrap();
        prop_assert_eq!(&both, &stepwise);
        prop_assert_eq!(both.get_path("trainer.max_epochs"), Some(&Value::Int(b)));
    }

    #[test]
    fn disjoint_overrides_commute(a in 0i64..100, b in "[a-z]{1,8}") {
        let base = parse_document("x:\n  n: 1\ny:\n  s: q\n", "b").unwrap();
        let d1 = parse_override(&format!("x.n={a}")).unwrap();
        let d2 = parse_override(&format!("y.s={b}")).unwrap();
        prop_assert_eq!(
            apply_overrides(&base, &[d1.clone(), d2.clone()]).unwrap(),
            apply_overrides(&base, &[d2, d1]).unwrap()
        );
    }
}

#[test]
fn override_values_are_typed() {
    let base = parse_document("a: 0\n", "b").unwrap();
    let cases = [("a=3", Value::Int(3)), ("a=0.001", Value::Float(0.001)), ("a=true", Value::Bool(true)), ("a=cpu", Value::Str("cpu".into()))];
    for (tok, want) in cases {
        let n = apply_overrides(&base, &[parse_override(tok).unwrap()]).unwrap();
        assert_eq!(n.get("a"), Some(&want), "{tok}");
    }
}

#[test]
fn set_and_add_are_distinct() {
    let base = parse_document("a: 0\n", "b").unwrap();
    assert!(apply_overrides(&base, &[parse_override("b=1").unwrap()]).is_err());
    assert!(apply_overrides(&base, &[parse_override("+a=1").unwrap()]).is_err());
    let n = apply_overrides(&base, &[parse_override("+b.c=1").unwrap()]).unwrap();
    assert_eq!(n.get_path("b.c"), Some(&Value::Int(1)));
}
