//! The TTP as a network actor. Requests are handled one at a time in
//! arrival order; only guard provisioning, which waits on the guards,
//! runs as its own task.

use std::cell::RefCell;
use std::rc::Rc;

use guard_core::codec::{DecodeError, Reader, Writer};
use guard_core::crypto::{Signature, SIGNATURE_LEN};
use guard_core::ids::Address;
use guard_core::skipgraph::{LookupTable, NeighborEntry, TableProof};
use guard_core::ttp::{Challenge, PhysicalIdentity, Ttp};
use guard_net::{Endpoint, Envelope, NetError, Sim};

use crate::cost;
use crate::messages::{err_reply, kind, ok_reply, open_reply};

pub fn ttp_address() -> Address {
    Address::new("ttp", 6999)
}

pub fn write_signatures(w: &mut Writer, sigs: &[Signature]) {
    w.u32(sigs.len() as u32);
    for s in sigs {
        w.raw(s.as_bytes());
    }
}

pub fn read_signatures(r: &mut Reader<'_>) -> Result<Vec<Signature>, DecodeError> {
    let n = r.u32()? as usize;
    (0..n).map(|_| r.array::<SIGNATURE_LEN>().map(Signature)).collect()
}

pub fn spawn_ttp(sim: &Sim, ttp: Ttp, control_timeout_us: u64) -> Result<(), NetError> {
    let ep = sim.bind(ttp_address())?;
    let ttp = Rc::new(RefCell::new(ttp));
    sim.spawn(async move {
        loop {
            let env = ep.recv().await;
            handle(&ep, &ttp, env, control_timeout_us);
        }
    });
    Ok(())
}

fn handle(ep: &Endpoint, ttp: &Rc<RefCell<Ttp>>, env: Envelope, timeout: u64) {
    let mut r = Reader::new(&env.body);
    let (body, delay) = match env.kind {
        kind::TTP_REGISTER => {
            let res = (|| {
                let phys = PhysicalIdentity::new(r.bytes().map_err(|e| e.to_string())?);
                let addr = r.address().map_err(|e| e.to_string())?;
                let mut t = ttp.borrow_mut();
                let grant = t.register(&phys, &addr).map_err(|e| e.to_string())?;
                Ok::<_, String>((grant, t.publish_params()))
            })();
            let body = match res {
                Ok((grant, params)) => ok_reply(|w| {
                    grant.write(w);
                    params.write(w);
                }),
                Err(e) => err_reply(&e),
            };
            (body, cost::KEYGEN_US)
        }
        kind::CHALLENGE => {
            let res = r
                .bytes()
                .map_err(|e| e.to_string())
                .and_then(|p| ttp.borrow_mut().begin_auth(&PhysicalIdentity::new(p)).map_err(|e| e.to_string()));
            let body = match res {
                Ok(c) => ok_reply(|w| c.write(w)),
                Err(e) => err_reply(&e),
            };
            (body, cost::ROUTE_US)
        }
        kind::CHALLENGE_RESPONSE => {
            let res = (|| {
                let session = r.u64().map_err(|e| e.to_string())?;
                let sigs = read_signatures(&mut r).map_err(|e| e.to_string())?;
                ttp.borrow_mut().finish_auth(session, &sigs).map_err(|e| e.to_string())
            })();
            let body = match res {
                Ok(id) => ok_reply(|w| {
                    w.id(id);
                }),
                Err(e) => err_reply(&e),
            };
            (body, cost::VERIFY_US * guard_core::ttp::CHALLENGE_COUNT as u64)
        }
        kind::TABLE_SUBMIT => {
            let res = (|| {
                let table = LookupTable::read(&mut r).map_err(|e| e.to_string())?;
                let proof = TableProof::read(&mut r).map_err(|e| e.to_string())?;
                // the table must come from its owner
                if table.owner().address != env.src {
                    return Err(format!("table of {} submitted by {}", table.owner().address, env.src));
                }
                let n = proof.len() as u64;
                let names = ttp.borrow_mut().submit_table(table, proof).map_err(|e| e.to_string())?;
                Ok((names, n))
            })();
            match res {
                Ok((names, n)) => (ok_reply(|w| names.write(w)), cost::VERIFY_US * n),
                Err(e) => (err_reply(&e), cost::VERIFY_US),
            }
        }
        kind::GUARD_CONNECT => {
            let ep = ep.clone();
            let ttp = ttp.clone();
            ep.sim().clone().spawn(async move {
                let body = match provision(&ep, &ttp, &env, timeout).await {
                    Ok(cert) => ok_reply(|w| cert.write(w)),
                    Err(e) => err_reply(&e),
                };
                ep.reply(&env, kind::GUARD_CONNECT, body, cost::KEYGEN_US);
            });
            return;
        }
        _ => return,
    };
    ep.reply(&env, env.kind, body, delay);
}

/// Deals the subject's shares to the guards it located and returns the
/// subject's name-id certificate once every guard has acknowledged.
async fn provision(
    ep: &Endpoint,
    ttp: &Rc<RefCell<Ttp>>,
    env: &Envelope,
    timeout: u64,
) -> Result<guard_core::crypto::Certificate, String> {
    let mut r = Reader::new(&env.body);
    let subject = r.id().map_err(|e| e.to_string())?;
    let mut guards = Vec::with_capacity(3);
    for _ in 0..3 {
        guards.push(NeighborEntry::read(&mut r).map_err(|e| e.to_string())?);
    }
    let guards: [NeighborEntry; 3] = guards.try_into().expect("three guards");
    let registered = ttp.borrow().registered().find(|e| e.numerical_id == subject).cloned();
    if registered.is_none_or(|e| e.address != env.src) {
        return Err(format!("guard connect for {subject} from {}", env.src));
    }
    let p = ttp.borrow_mut().guard_connect(subject, guards).map_err(|e| e.to_string())?;
    for (g, prov) in p.assignment.guards.iter().zip(&p.provisions) {
        let mut w = Writer::new();
        prov.write(&mut w);
        let reply = ep.request(&g.address, kind::PROVISION, w.finish(), timeout).await;
        let reply = reply.map_err(|e| format!("provisioning guard {}: {e}", g.numerical_id))?;
        open_reply(&reply.body).map_err(|e| format!("guard {} refused provision: {e}", g.numerical_id))?;
    }
    Ok(p.name_certificate)
}

/// Encodes a challenge request body.
pub fn challenge_request(phys: &PhysicalIdentity) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&phys.0);
    w.finish()
}

pub fn read_challenge(body: &[u8]) -> Result<Challenge, String> {
    let mut r = open_reply(body)?;
    Challenge::read(&mut r).map_err(|e| e.to_string())
}
