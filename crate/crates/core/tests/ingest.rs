use std::net::IpAddr;

use semalign::ingest::{
    assign_flow_indices, infer_http_versions, parse_packet_jsonl, parse_pcap, parse_resource_jsonl,
    CaptureConfig, PacketLine,
};
use semalign::{Direction, Error, Transport};

const CLIENT: [u8; 4] = [10, 0, 0, 2];
const WEB: [u8; 4] = [93, 184, 216, 34];
const CDN: [u8; 4] = [151, 101, 1, 69];

#[derive(Clone, Copy)]
enum L4 {
    Tcp,
    Udp,
}

struct Pcap {
    big_endian: bool,
    nanos: bool,
    link: u32,
    body: Vec<u8>,
}

impl Pcap {
    fn new() -> Self {
        Pcap {
            big_endian: false,
            nanos: false,
            link: 1,
            body: Vec::new(),
        }
    }

    fn u32(&self, v: u32) -> [u8; 4] {
        if self.big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        }
    }

    fn record(&mut self, sec: u32, frac: u32, frame: &[u8]) {
        let mut r = Vec::new();
        r.extend(self.u32(sec));
        r.extend(self.u32(frac));
        r.extend(self.u32(frame.len() as u32));
        r.extend(self.u32(frame.len() as u32));
        r.extend(frame);
        self.body.extend(r);
    }

    fn bytes(&self) -> Vec<u8> {
        let magic = if self.nanos { 0xA1B2_3C4D } else { 0xA1B2_C3D4 };
        let mut out = Vec::new();
        out.extend(self.u32(magic));
        out.extend(if self.big_endian {
            2u16.to_be_bytes()
        } else {
            2u16.to_le_bytes()
        });
        out.extend(if self.big_endian {
            4u16.to_be_bytes()
        } else {
            4u16.to_le_bytes()
        });
        out.extend(self.u32(0));
        out.extend(self.u32(0));
        out.extend(self.u32(65535));
        out.extend(self.u32(self.link));
        out.extend(&self.body);
        out
    }
}

fn l4_segment(l4: L4, sport: u16, dport: u16, payload: &[u8]) -> (u8, Vec<u8>) {
    let mut seg = Vec::new();
    seg.extend(sport.to_be_bytes());
    seg.extend(dport.to_be_bytes());
    match l4 {
        L4::Tcp => {
            seg.extend([0u8; 8]);
            seg.push(5 << 4);
            seg.push(0x18);
            seg.extend([0u8; 6]);
            seg.extend(payload);
            (6, seg)
        }
        L4::Udp => {
            seg.extend((8 + payload.len() as u16).to_be_bytes());
            seg.extend([0u8; 2]);
            seg.extend(payload);
            (17, seg)
        }
    }
}

fn ether(ethertype: u16, ip: Vec<u8>) -> Vec<u8> {
    let mut f = vec![0u8; 12];
    f.extend(ethertype.to_be_bytes());
    f.extend(ip);
    f
}

fn ipv4(
    src: [u8; 4],
    dst: [u8; 4],
    l4: L4,
    sport: u16,
    dport: u16,
    payload: &[u8],
    frag: u16,
) -> Vec<u8> {
    let (proto, seg) = l4_segment(l4, sport, dport, payload);
    let mut ip = vec![0x45, 0];
    ip.extend((20 + seg.len() as u16).to_be_bytes());
    ip.extend([0, 0]);
    ip.extend(frag.to_be_bytes());
    ip.extend([64, proto, 0, 0]);
    ip.extend(src);
    ip.extend(dst);
    ip.extend(seg);
    ether(0x0800, ip)
}

fn v4(src: [u8; 4], dst: [u8; 4], l4: L4, sport: u16, dport: u16, payload: &[u8]) -> Vec<u8> {
    ipv4(src, dst, l4, sport, dport, payload, 0x4000)
}

fn ipv6(src: [u8; 16], dst: [u8; 16], l4: L4, sport: u16, dport: u16, payload: &[u8]) -> Vec<u8> {
    let (proto, seg) = l4_segment(l4, sport, dport, payload);
    let mut ip = vec![0x60, 0, 0, 0];
    ip.extend((seg.len() as u16).to_be_bytes());
    ip.extend([proto, 64]);
    ip.extend(src);
    ip.extend(dst);
    ip.extend(seg);
    ether(0x86DD, ip)
}

fn appdata(n: usize) -> Vec<u8> {
    let mut p = vec![0x17, 3, 3];
    p.resize(n, 0xaa);
    p
}

fn handshake(n: usize) -> Vec<u8> {
    let mut p = vec![0x16, 3, 1];
    p.resize(n, 0x01);
    p
}

fn browsing_capture() -> Pcap {
    let mut cap = Pcap::new();
    cap.record(1, 0, &v4(CLIENT, WEB, L4::Tcp, 50000, 443, &handshake(517)));
    cap.record(
        1,
        10,
        &v4(WEB, CLIENT, L4::Tcp, 443, 50000, &handshake(1400)),
    );
    cap.record(1, 20, &v4(CLIENT, WEB, L4::Tcp, 50000, 443, &[]));
    cap.record(1, 30, &v4(CLIENT, WEB, L4::Tcp, 50000, 443, &appdata(92)));
    cap.record(1, 40, &v4(WEB, CLIENT, L4::Tcp, 443, 50000, &appdata(1300)));
    cap.record(1, 50, &v4(CLIENT, CDN, L4::Udp, 50001, 443, &[0xc3; 1200]));
    cap.record(1, 60, &v4(CDN, CLIENT, L4::Udp, 443, 50001, &[0x40; 700]));
    cap.record(2, 0, &v4(CLIENT, WEB, L4::Tcp, 50002, 8443, &appdata(64)));
    cap
}

#[test]
fn parses_tcp_and_udp_records() {
    let bytes = browsing_capture().bytes();
    let cap = parse_pcap(&bytes, &CaptureConfig::default()).unwrap();
    let p = &cap.trace.packets;
    assert_eq!(cap.stats.records, 7);
    assert_eq!(cap.stats.empty_payload, 1);
    assert_eq!(
        cap.stats.truncated + cap.stats.unsupported + cap.stats.foreign,
        0
    );
    let lens: Vec<u32> = p.iter().map(|r| r.payload_len).collect();
    assert_eq!(lens, vec![517, 1400, 92, 1300, 1200, 700, 64]);
    let dirs: Vec<Direction> = p.iter().map(|r| r.direction).collect();
    use Direction::{ClientToServer as C, ServerToClient as S};
    assert_eq!(dirs, vec![C, S, C, S, C, S, C]);
    assert!(p[..6].iter().all(|r| r.server_port == 443));
    assert_eq!(p[6].server_port, 8443);
    assert_eq!(p[1].server_ip, "93.184.216.34");
    assert_eq!(p[4].server_ip, "151.101.1.69");
    assert_eq!(p[4].transport, Transport::Udp);
    assert_eq!(p[4].first_payload_byte, None);
    assert_eq!(p[2].first_payload_byte, Some(0x17));
    assert!((p[1].timestamp - 1.000010).abs() < 1e-12);
    assert!((p[6].timestamp - 2.0).abs() < 1e-12);
}

#[test]
fn versions_and_flows() {
    let cap = parse_pcap(&browsing_capture().bytes(), &CaptureConfig::default()).unwrap();
    assert_eq!(infer_http_versions(&cap.trace), vec![1, 1, 2, 2, 3, 3, 1]);
    assert_eq!(assign_flow_indices(&cap.trace), vec![1, 1, 1, 1, 2, 2, 3]);
}

#[test]
fn big_endian_nanosecond_capture() {
    let mut cap = Pcap::new();
    cap.big_endian = true;
    cap.nanos = true;
    cap.record(
        5,
        250_000_000,
        &v4(CLIENT, WEB, L4::Tcp, 40000, 443, &appdata(80)),
    );
    cap.record(
        5,
        500_000_000,
        &v4(WEB, CLIENT, L4::Tcp, 443, 40000, &appdata(900)),
    );
    let out = parse_pcap(&cap.bytes(), &CaptureConfig::default()).unwrap();
    let ts: Vec<f64> = out.trace.packets.iter().map(|p| p.timestamp).collect();
    assert_eq!(ts, vec![5.25, 5.5]);
    assert_eq!(out.trace.packets[1].payload_len, 900);
}

#[test]
fn ipv6_and_client_hint() {
    let client6: [u8; 16] = [0x20, 0x01, 0x0d, 0xb8, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 2];
    let server6: [u8; 16] = [0x26, 0x06, 0x47, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1];
    let mut cap = Pcap::new();
    // The first frame is from the server; the hint keeps directions right.
    cap.record(
        0,
        0,
        &ipv6(server6, client6, L4::Udp, 443, 55000, &[1; 300]),
    );
    cap.record(0, 1, &ipv6(client6, server6, L4::Udp, 55000, 443, &[1; 90]));
    cap.record(0, 2, &v4(WEB, CDN, L4::Tcp, 1, 2, &appdata(10)));
    let cfg = CaptureConfig {
        client_hint: Some(IpAddr::from(client6)),
        ..CaptureConfig::default()
    };
    let out = parse_pcap(&cap.bytes(), &cfg).unwrap();
    assert_eq!(out.stats.foreign, 1);
    let p = &out.trace.packets;
    assert_eq!(p.len(), 2);
    assert_eq!(p[0].direction, Direction::ServerToClient);
    assert_eq!(p[0].server_ip, "2606:4700::1");
    assert_eq!(p[1].direction, Direction::ClientToServer);
}

#[test]
fn odd_frames_are_counted_not_fatal() {
    let mut cap = Pcap::new();
    cap.record(0, 0, &v4(CLIENT, WEB, L4::Tcp, 1000, 443, &appdata(50)));
    // VLAN-tagged frame.
    cap.record(0, 1, &ether(0x8100, vec![0; 40]));
    // Fragment with a non-zero offset.
    cap.record(
        0,
        2,
        &ipv4(CLIENT, WEB, L4::Udp, 1000, 443, &[0; 20], 0x0010),
    );
    // Ethernet header cut short.
    cap.record(0, 3, &[0u8; 10]);
    let mut bytes = cap.bytes();
    // A record header whose frame runs past the end of the file.
    bytes.extend(16u32.to_le_bytes());
    bytes.extend(0u32.to_le_bytes());
    bytes.extend(500u32.to_le_bytes());
    bytes.extend(500u32.to_le_bytes());
    bytes.extend([0u8; 20]);
    let out = parse_pcap(&bytes, &CaptureConfig::default()).unwrap();
    assert_eq!(out.stats.records, 1);
    assert_eq!(out.stats.unsupported, 2);
    assert_eq!(out.stats.truncated, 2);
}

#[test]
fn out_of_order_records_are_sorted() {
    let mut cap = Pcap::new();
    cap.record(3, 0, &v4(CLIENT, WEB, L4::Tcp, 1000, 443, &appdata(30)));
    cap.record(1, 0, &v4(CLIENT, WEB, L4::Tcp, 1000, 443, &appdata(10)));
    cap.record(2, 0, &v4(CLIENT, WEB, L4::Tcp, 1000, 443, &appdata(20)));
    let out = parse_pcap(&cap.bytes(), &CaptureConfig::default()).unwrap();
    let lens: Vec<u32> = out.trace.packets.iter().map(|p| p.payload_len).collect();
    assert_eq!(lens, vec![10, 20, 30]);
}

#[test]
fn rejects_unreadable_files() {
    let mut ng = vec![0x0A, 0x0D, 0x0D, 0x0A];
    ng.resize(32, 0);
    assert!(matches!(
        parse_pcap(&ng, &CaptureConfig::default()),
        Err(Error::Unsupported(_))
    ));
    let mut junk = vec![0xde, 0xad, 0xbe, 0xef];
    junk.resize(32, 0);
    assert!(matches!(
        parse_pcap(&junk, &CaptureConfig::default()),
        Err(Error::Format(_))
    ));
    assert!(matches!(
        parse_pcap(&[0u8; 8], &CaptureConfig::default()),
        Err(Error::Format(_))
    ));
    let mut raw_ip = Pcap::new();
    raw_ip.link = 101;
    assert!(matches!(
        parse_pcap(&raw_ip.bytes(), &CaptureConfig::default()),
        Err(Error::Unsupported(_))
    ));
}

#[test]
fn jsonl_matches_pcap_and_round_trips() {
    let cap = parse_pcap(&browsing_capture().bytes(), &CaptureConfig::default()).unwrap();
    let text: String = cap
        .trace
        .packets
        .iter()
        .map(|p| serde_json::to_string(&PacketLine::from(p)).unwrap() + "\n")
        .collect();
    let back = parse_packet_jsonl(&text).unwrap();
    assert_eq!(back.packets, cap.trace.packets);
    assert!(parse_packet_jsonl("").unwrap().packets.is_empty());
    let err = parse_packet_jsonl("{\"b0\":null,\"dir\":\"c2s\",\"len\":-1,\"server_ip\":\"a\",\"server_port\":1,\"transport\":\"tcp\",\"ts\":0}\n").unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }));
}

#[test]
fn resource_log_derives_huffman_lengths() {
    let text = concat!(
        "{\"alt_svc_h3\":true,\"header_len\":310,\"http_version\":\"h3\",\"mime_type\":\"image/png\",",
        "\"response_size\":4096,\"server_ip\":\"151.101.1.69\",\"uri\":\"/img/logo.png\"}\n",
        "\n",
        "{\"alt_svc_h3\":false,\"header_len\":280,\"http_version\":\"h2\",\"mime_type\":\"text/css\",",
        "\"response_size\":900,\"server_ip\":\"93.184.216.34\",\"uri\":\"/\"}\n",
    );
    let p = parse_resource_jsonl(text).unwrap();
    assert_eq!(p.resources.len(), 2);
    assert_eq!(p.resources[0].uri_raw_len, 13);
    assert_eq!(
        p.resources[0].uri_huffman_len,
        semalign::huffman::huffman_encoded_len(b"/img/logo.png")
    );
    assert_eq!(p.resources[1].uri_huffman_len, 1);
    let bad = text.replace("\"h2\"", "\"h9\"");
    match parse_resource_jsonl(&bad) {
        Err(Error::Validation(m)) => assert!(m.starts_with("line 3:"), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
}
