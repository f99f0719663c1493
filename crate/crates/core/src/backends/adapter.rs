//! TCP client and reference server for out-of-process model adapters.
//!
//! A pretrained-model adapter listens on a TCP address and answers the
//! requests described in [`super::wire`]. The client implements every model
//! contract; it always declares [`Concurrency::Serial`] because a single
//! connection is shared. [`serve`] exposes any [`Backend`] over the same
//! protocol, which is how the toy backend is exercised end to end.

use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Mutex;

use super::wire::{read_message, write_message, Op, Request, Response, Tensor};
use super::{
    AttributeLoss, AttributeScorer, Backend, Concurrency, Conditioning, Denoiser, FaceParser,
    IdentityEmbedder, LatentCodec,
};
use crate::error::{Error, Result};
use crate::grid::{Image, Latent, Shape};
use crate::masking::ParseMap;
use crate::metrics::IdentityEmbedding;

/// Environment variable holding the adapter address (`host:port`).
pub const ADAPTER_ENV: &str = "FACEANON_ADAPTER";

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

pub struct AdapterClient {
    conn: Mutex<Connection>,
    peer: String,
}

impl AdapterClient {
    pub fn connect(addr: impl ToSocketAddrs + std::fmt::Debug) -> Result<Self> {
        let peer = format!("{addr:?}");
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::Backend(format!("cannot reach adapter at {peer}: {e}")))?;
        stream.set_nodelay(true)?;
        let conn = Connection {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        };
        Ok(Self {
            conn: Mutex::new(conn),
            peer,
        })
    }

    /// Connect to the address in [`ADAPTER_ENV`].
    pub fn from_env() -> Result<Self> {
        let addr = std::env::var(ADAPTER_ENV)
            .map_err(|_| Error::Backend(format!("{ADAPTER_ENV} is not set")))?;
        Self::connect(addr.as_str())
    }

    pub fn call(&self, op: Op, tensors: Vec<Tensor>) -> Result<Vec<Tensor>> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| Error::Backend("adapter connection poisoned".into()))?;
        write_message(&mut conn.writer, &Request { op, tensors }.encode())?;
        let body = read_message(&mut conn.reader)?.ok_or_else(|| {
            Error::Backend(format!("adapter {} closed the connection", self.peer))
        })?;
        match Response::decode(&body)? {
            Response::Ok(t) => Ok(t),
            Response::Err(msg) => Err(Error::Backend(msg)),
        }
    }

    fn call_n<const N: usize>(&self, op: Op, tensors: Vec<Tensor>) -> Result<[Tensor; N]> {
        let out = self.call(op, tensors)?;
        let got = out.len();
        out.try_into()
            .map_err(|_| Error::Protocol(format!("{op:?}: expected {N} tensors, got {got}")))
    }

    /// Whether the remote side claims concurrent safety.
    pub fn remote_is_concurrent(&self) -> Result<bool> {
        let [flag] = self.call_n(Op::Info, vec![])?;
        Ok(flag.to_scalar()? != 0.0)
    }
}

impl LatentCodec for AdapterClient {
    fn encode(&self, image: &Image) -> Result<Latent> {
        let [z] = self.call_n(Op::Encode, vec![Tensor::from_grid(image)])?;
        z.to_grid()
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let [x] = self.call_n(Op::Decode, vec![Tensor::from_grid(latent)])?;
        x.to_grid()
    }

    fn latent_shape(&self, image: Shape) -> Result<Shape> {
        let probe = Tensor::vector(&[
            image.channels as f64,
            image.height as f64,
            image.width as f64,
        ]);
        let [s] = self.call_n(Op::LatentShape, vec![probe])?;
        match s.to_vec().as_slice() {
            [c, h, w] => Ok(Shape::new(*c as usize, *h as usize, *w as usize)),
            _ => Err(Error::Protocol(
                "latent shape must have three entries".into(),
            )),
        }
    }

    /// f32 transport alone costs about 1e-7 relative.
    fn reconstruction_tolerance(&self) -> f64 {
        1e-2
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Serial
    }
}

impl Denoiser for AdapterClient {
    fn predict_noise(&self, z_t: &Latent, t: usize, cond: &Conditioning) -> Result<Latent> {
        let mut args = vec![
            Tensor::from_grid(z_t),
            Tensor::scalar(t as f64),
            Tensor::from_grid(&cond.latent),
        ];
        if let Some(m) = &cond.mask {
            args.push(Tensor::from_grid(m));
        }
        let [eps] = self.call_n(Op::PredictNoise, args)?;
        let eps = eps.to_grid()?;
        eps.ensure_shape(z_t.shape())?;
        Ok(eps)
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Serial
    }
}

impl AttributeScorer for AdapterClient {
    fn loss_and_grad(&self, z_tilde0: &Latent, target: &Image) -> Result<AttributeLoss> {
        let [loss, grad] = self.call_n(
            Op::LossAndGrad,
            vec![Tensor::from_grid(z_tilde0), Tensor::from_grid(target)],
        )?;
        let grad = grad.to_grid()?;
        grad.ensure_shape(z_tilde0.shape())?;
        Ok(AttributeLoss {
            loss: loss.to_scalar()?,
            grad,
        })
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Serial
    }
}

impl FaceParser for AdapterClient {
    fn parse(&self, image: &Image) -> Result<ParseMap> {
        let [labels] = self.call_n(Op::Parse, vec![Tensor::from_grid(image)])?;
        ParseMap::from_grid(labels.to_labels()?)
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Serial
    }
}

impl IdentityEmbedder for AdapterClient {
    fn embed(&self, image: &Image) -> Result<IdentityEmbedding> {
        let [e] = self.call_n(Op::Embed, vec![Tensor::from_grid(image)])?;
        IdentityEmbedding::new(e.to_vec())
    }

    fn activations(&self, image: &Image) -> Result<Vec<f64>> {
        let [a] = self.call_n(Op::Activations, vec![Tensor::from_grid(image)])?;
        Ok(a.to_vec())
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Serial
    }
}

fn dispatch(backend: &Backend, req: Request) -> Result<Vec<Tensor>> {
    let arg = |i: usize| {
        req.tensors
            .get(i)
            .ok_or_else(|| Error::Protocol(format!("{:?}: missing argument {i}", req.op)))
    };
    Ok(match req.op {
        Op::Info => vec![Tensor::scalar(
            (backend.concurrency() == Concurrency::Concurrent) as u8 as f64,
        )],
        Op::Encode => vec![Tensor::from_grid(
            &backend.codec.encode(&arg(0)?.to_grid()?)?,
        )],
        Op::Decode => vec![Tensor::from_grid(
            &backend.codec.decode(&arg(0)?.to_grid()?)?,
        )],
        Op::PredictNoise => {
            let z = arg(0)?.to_grid()?;
            let t = arg(1)?.to_scalar()?;
            if t < 0.0 || t.fract() != 0.0 {
                return Err(Error::Protocol(format!(
                    "timestep {t} is not a whole number"
                )));
            }
            let mut cond = Conditioning::new(arg(2)?.to_grid()?);
            if let Some(m) = req.tensors.get(3) {
                cond.mask = Some(m.to_grid()?);
            }
            vec![Tensor::from_grid(
                &backend.denoiser.predict_noise(&z, t as usize, &cond)?,
            )]
        }
        Op::LossAndGrad => {
            let r = backend
                .scorer
                .loss_and_grad(&arg(0)?.to_grid()?, &arg(1)?.to_grid()?)?;
            vec![Tensor::scalar(r.loss), Tensor::from_grid(&r.grad)]
        }
        Op::Parse => vec![Tensor::from_labels(
            backend.parser.parse(&arg(0)?.to_grid()?)?.labels(),
        )],
        Op::Embed => vec![Tensor::vector(
            backend.embedder.embed(&arg(0)?.to_grid()?)?.as_slice(),
        )],
        Op::Activations => vec![Tensor::vector(
            &backend.embedder.activations(&arg(0)?.to_grid()?)?,
        )],
        Op::LatentShape => {
            let dims = arg(0)?.to_vec();
            let [c, h, w] = dims.as_slice() else {
                return Err(Error::Protocol("shape probe needs three entries".into()));
            };
            let s =
                backend
                    .codec
                    .latent_shape(Shape::new(*c as usize, *h as usize, *w as usize))?;
            vec![Tensor::vector(&[
                s.channels as f64,
                s.height as f64,
                s.width as f64,
            ])]
        }
    })
}

/// Answer requests on one connection until the peer hangs up.
pub fn serve_connection(stream: TcpStream, backend: &Backend) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(body) = read_message(&mut reader)? {
        let resp = match Request::decode(&body).and_then(|req| dispatch(backend, req)) {
            Ok(tensors) => Response::Ok(tensors),
            Err(e) => Response::Err(e.to_string()),
        };
        write_message(&mut writer, &resp.encode())?;
    }
    Ok(())
}

/// Serve connections one after another, forever or until accept fails.
pub fn serve(listener: TcpListener, backend: &Backend) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let peer = stream
            .peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_default();
        log::info!("adapter client connected from {peer}");
        if let Err(e) = serve_connection(stream, backend) {
            log::warn!("connection from {peer} ended with error: {e}");
        }
    }
    Ok(())
}
