use motley::data;
use motley::model::load_codec;
use motley::repr::{recover_motion, Skeleton};
use motley::repr::geom;

fn main() {
    let skel = Skeleton::humanoid22();
    let arg = std::env::args().nth(1).unwrap_or_else(|| "/tmp/run/codec_d2t.mlck".to_string());
    let (store, codec) = load_codec(std::path::Path::new(&arg)).unwrap();
    let all = data::read_corpus(std::path::Path::new("/tmp/run/corpus2k"), &skel).unwrap();
    let val: Vec<_> = all.into_iter().filter(|s| s.record.split == data::io::Split::Val).take(40).collect();
    let d = 272;
    let mut group_err = [0.0f64; 4]; // rootvel(8), pos, vel, rot — raw units MSE
    let mut group_cnt = [0usize; 4];
    let mut drift_by_quarter = [0.0f64; 4];
    let mut local_mpjpe = 0.0f64;
    let mut root_mpjpe = 0.0f64;
    let mut n = 0usize;
    for s in &val {
        let (mu, pad) = codec.encode_seq(&store, &s.seq).unwrap();
        let rec = codec.decode_to_motion(&store, &mu, s.seq.fps, pad);
        let f_total = s.seq.frames();
        // raw feature errors by group
        for f in 0..f_total {
            let a = s.seq.frame(f);
            let b = rec.frame(f);
            for i in 0..d {
                let g = if i < 8 { 0 } else if i < 8 + 66 { 1 } else if i < 8 + 132 { 2 } else { 3 };
                let e = (a[i] - b[i]) as f64;
                group_err[g] += e * e;
                group_cnt[g] += 1;
            }
        }
        // recover both; root trajectory error vs local error
        let gt = recover_motion(&s.seq, &skel).unwrap();
        let rc = recover_motion(&rec, &skel).unwrap();
        for f in 0..f_total {
            let (gx, gz) = gt.root_planar(f);
            let (rx, rz) = rc.root_planar(f);
            let droot = (((gx - rx).powi(2) + (gz - rz).powi(2)) as f64).sqrt();
            root_mpjpe += droot;
            let q = (f * 4 / f_total).min(3);
            drift_by_quarter[q] += droot;
            // local: positions relative to own root planar + yaw
            for j in 0..22 {
                let lg = geom::sub(gt.positions[f][j], [gx, 0.0, gz]);
                let lr = geom::sub(rc.positions[f][j], [rx, 0.0, rz]);
                let gy = geom::yaw_matrix(-gt.yaw[f]);
                let ry = geom::yaw_matrix(-rc.yaw[f]);
                let a = geom::mat_vec(&gy, lg);
                let b = geom::mat_vec(&ry, lr);
                local_mpjpe += geom::norm(geom::sub(a, b)) as f64;
            }
            n += 1;
        }
    }
    println!("raw-unit RMS err: rootvel {:.5} pos {:.5} vel {:.5} rot {:.5}",
        (group_err[0]/group_cnt[0] as f64).sqrt(),
        (group_err[1]/group_cnt[1] as f64).sqrt(),
        (group_err[2]/group_cnt[2] as f64).sqrt(),
        (group_err[3]/group_cnt[3] as f64).sqrt());
    println!("root planar err mm: {:.2}  local-frame mpjpe mm: {:.2}", root_mpjpe / n as f64 * 1000.0, local_mpjpe / (n as f64 * 22.0) * 1000.0);
    let qn = n as f64 / 4.0;
    println!("root drift by quarter (mm): {:.1} {:.1} {:.1} {:.1}",
        drift_by_quarter[0]/qn*1000.0, drift_by_quarter[1]/qn*1000.0, drift_by_quarter[2]/qn*1000.0, drift_by_quarter[3]/qn*1000.0);
    // drift at specific frame indices
    for probe_f in [4usize, 8, 16, 32, 64] {
        let mut acc = 0.0f64;
        let mut cnt = 0usize;
        for s in &val {
            let (mu, pad) = codec.encode_seq(&store, &s.seq).unwrap();
            let rec = codec.decode_to_motion(&store, &mu, s.seq.fps, pad);
            if probe_f >= s.seq.frames() { continue; }
            let gt = recover_motion(&s.seq, &skel).unwrap();
            let rc = recover_motion(&rec, &skel).unwrap();
            let (gx, gz) = gt.root_planar(probe_f);
            let (rx, rz) = rc.root_planar(probe_f);
            acc += (((gx - rx).powi(2) + (gz - rz).powi(2)) as f64).sqrt();
            cnt += 1;
        }
        println!("drift at frame {probe_f}: {:.1} mm ({cnt} seqs)", acc / cnt as f64 * 1000.0);
    }
}
