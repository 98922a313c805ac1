/**
 * FNV-1a over UTF-8 bytes, 64-bit, via BigInt.
 *
 * The manager's built-in mock backend uses the same hash; matching it
 * bit for bit is what makes mock-mode conformance byte-identical.
 */

const FNV_OFFSET = 14695981039346656037n;
const FNV_PRIME = 1099511628211n;
const MASK64 = (1n << 64n) - 1n;

export function fnv1a64(text: string): bigint {
  let hash = FNV_OFFSET;
  for (const byte of Buffer.from(text, "utf-8")) {
    hash = ((hash ^ BigInt(byte)) * FNV_PRIME) & MASK64;
  }
  return hash;
}

/**
 * Map a 64-bit hash onto [0, 1]. Number(hash) rounds to the nearest
 * double exactly like Python's int-to-float conversion, and dividing by
 * 2^64 is exact scaling, so both sides produce the identical double.
 */
export function hashToUnit(hash: bigint): number {
  return Number(hash) / 2 ** 64;
}
