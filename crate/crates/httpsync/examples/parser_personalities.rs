//! Parse the same request bytes under every shipped parser personality and
//! print each hop's honored interpretation: which framing it believes, which
//! path it would serve, which host it would route to.
//!
//!     cargo run --example parser_personalities

use httpsync::wire::{parse_request, FramingDecision, ParserPersonality, RawRequest};

fn show(title: &str, raw: &[u8]) {
    println!("== {title}");
    for line in String::from_utf8_lossy(raw).lines() {
        if line.is_empty() {
            break;
        }
        println!("   | {line}");
    }
    let raw = RawRequest::new(raw.to_vec());
    for name in ParserPersonality::preset_names() {
        let p = ParserPersonality::preset(name).unwrap();
        match parse_request(&raw, &p) {
            Ok(req) => {
                let framing = match req.framing {
                    FramingDecision::NoBody => "no body".to_string(),
                    FramingDecision::ContentLength(n) => format!("content-length {n}"),
                    FramingDecision::Chunked => "chunked".to_string(),
                };
                println!(
                    "   {name:<26} path={:<28} host={:<20} framing={framing}",
                    String::from_utf8_lossy(&req.honored_path),
                    String::from_utf8_lossy(&req.honored_host),
                );
            }
            Err(e) => println!("   {name:<26} rejected: {e}"),
        }
    }
    println!();
}

fn main() {
    show(
        "ambiguous framing: Content-Length vs a Transfer-Encoding only some accept",
        &httpsync::harness::corpus::listing1(),
    );
    show(
        "path confusion: style-sheet suffix on a script path",
        b"GET /account.php/image.png HTTP/1.1\r\nHost: www.example.com\r\n\r\n",
    );
    show(
        "encoded query confusion",
        b"GET /account.php%3Fimage.png HTTP/1.1\r\nHost: www.example.com\r\n\r\n",
    );
    show(
        "host confusion: absolute-form target vs Host header",
        b"GET http://admin.example.com/dash HTTP/1.1\r\nHost: public.example.com\r\n\r\n",
    );
    show(
        "fat GET: body on a method that usually has none",
        b"GET /profile HTTP/1.1\r\nHost: www.example.com\r\nContent-Length: 13\r\n\r\npotatoandeggs",
    );
    println!("disagreement between any two rows is a discrepancy the sync layer detects");
}
