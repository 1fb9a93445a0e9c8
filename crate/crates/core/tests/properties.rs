use std::sync::Arc;

use proptest::prelude::*;

use tmf_core::meta::{reconstruct_in_place, server_aggregate, update_global_in_place, ClientState, ServerState};
use tmf_core::nn::{Activation, LossKind, NetworkSpec, Sample, WeightVector};
use tmf_core::partition::{Partition, PartitionPolicy};
use tmf_core::schedule::{ScheduleShape, ScheduleSpec};
use tmf_core::sparse::{selection_size, top_p_select};

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

prop_compose! {
    fn network()(hidden in prop::collection::vec(1usize..6, 1..4), input in 1usize..3, output in 1usize..3)
        -> NetworkSpec {
        let mut dims = vec![input];
        dims.extend(hidden);
        dims.push(output);
        NetworkSpec::mlp(&dims, Activation::Tanh, LossKind::Mse).unwrap()
    }
}

prop_compose! {
    fn client_case()(spec in network())(
        local in prop::collection::btree_set(0..spec.layers().len(), 1..=spec.layers().len()),
        w in prop::collection::vec(-1.0f32..1.0, spec.param_count()),
        xs in prop::collection::vec(-2.0f32..2.0, 2..12),
        k in 1usize..4,
        spec in Just(spec),
    ) -> (ClientState, WeightVector, Vec<Sample>) {
        let partition = Partition::new(&spec, PartitionPolicy::LocalLayers(local.into_iter().collect())).unwrap();
        let samples = xs
            .iter()
            .map(|&x| Sample::new(vec![x; spec.input_dim()], vec![x.sin(); spec.output_dim()]))
            .collect();
        let local_init: Vec<f32> = partition.gather_local(&WeightVector::new(w.clone())).unwrap();
        let client = ClientState {
            client_id: 0,
            spec,
            partition: Arc::new(partition),
            local_init: Arc::from(local_init),
            k,
            beta: 0.05,
        };
        (client, WeightVector::new(w), samples)
    }
}

proptest! {
    #[test]
    fn frozen_coordinates_never_move((client, mut w, samples) in client_case()) {
        let p = client.partition.clone();
        let half = samples.len() / 2;
        let global = bits(&p.gather_global(&w).unwrap());
        reconstruct_in_place(&client, &mut w, samples[..half].to_vec().into_iter()).unwrap();
        prop_assert_eq!(bits(&p.gather_global(&w).unwrap()), global);
        let local = bits(&p.gather_local(&w).unwrap());
        update_global_in_place(&client, &mut w, samples[half..].to_vec().into_iter()).unwrap();
        prop_assert_eq!(bits(&p.gather_local(&w).unwrap()), local);
    }

    #[test]
    fn aggregation_touches_only_selected_coordinates(
        before in prop::collection::vec(-1.0f32..1.0, 1..300),
        noise in prop::collection::vec(-1.0f32..1.0, 300),
        p in 1u32..=100,
        f in 0.0f64..=1.0,
    ) {
        let after: Vec<f32> = before.iter().zip(&noise).map(|(b, n)| b + n).collect();
        let delta = top_p_select(&before, &after, p as f64, 0).unwrap();
        prop_assert_eq!(delta.len(), selection_size(p as f64, before.len()));
        let state = ServerState::new(before.clone(), ScheduleSpec::constant(f, 1).unwrap());
        let next = server_aggregate(state, &delta).unwrap();
        let chosen: std::collections::HashSet<u32> = delta.indices().collect();
        for (i, (&old, &new)) in before.iter().zip(next.global()).enumerate() {
            if chosen.contains(&(i as u32)) {
                let d = after[i] - old;
                prop_assert_eq!(new.to_bits(), (old + f as f32 * d).to_bits());
            } else {
                prop_assert_eq!(new.to_bits(), old.to_bits());
            }
        }
        prop_assert!(next.is_finished());
    }

    #[test]
    fn schedule_stays_in_bounds_and_decreases(hi in 0.0f64..=1.0, frac in 0.0f64..=1.0, t_max in 0u32..5000) {
        let lo = hi * frac;
        let s = ScheduleSpec::new(hi, lo, t_max, ScheduleShape::CosineAnnealing).unwrap();
        prop_assert_eq!(s.value(0).unwrap(), hi);
        prop_assert_eq!(s.value(t_max).unwrap(), if t_max == 0 { hi } else { lo });
        let mut prev = f64::INFINITY;
        for t in (0..=t_max).step_by(1 + t_max as usize / 200) {
            let v = s.value(t).unwrap();
            prop_assert!(v <= prev && v >= lo && v <= hi);
            prev = v;
        }
        prop_assert!(s.value(t_max + 1).is_err());
    }
}
