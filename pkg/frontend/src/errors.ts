/** Base class for everything this library throws deliberately. */
export class SaturnClientError extends Error {
  constructor(message: string) {
    super(message);
    this.name = new.target.name;
  }
}

/** The server answered with an error envelope. */
export class SaturnApiError extends SaturnClientError {
  readonly status: number;
  readonly code: string;

  constructor(status: number, code: string, message: string) {
    super(`${code} (HTTP ${status}): ${message}`);
    this.status = status;
    this.code = code;
  }
}

/** The request never produced an HTTP response. */
export class TransportError extends SaturnClientError {}

/** The per-attempt deadline elapsed before the server answered. */
export class TimeoutError extends TransportError {}

/**
 * Rejected before any network call (bad arguments), or the server's
 * reply did not match the documented shape.
 */
export class ValidationError extends SaturnClientError {}
