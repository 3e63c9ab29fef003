/** three.js scene: incremental chunk rendering, trajectory, pose marker.
 *
 * Every chunk becomes one immutable Points object with its own GPU buffers,
 * matching the append-only stream; budget decimation toggles visibility of
 * the oldest chunks instead of rebuilding buffers.
 */

import * as THREE from "three";
import { OrbitControls } from "three/examples/jsm/controls/OrbitControls.js";
import { ChunkBuffer, ViewerState } from "./state";

export class SceneRenderer {
  readonly renderer: THREE.WebGLRenderer;
  readonly scene: THREE.Scene;
  readonly camera: THREE.PerspectiveCamera;
  readonly controls: OrbitControls;
  private chunkObjects = new Map<number, THREE.Points>(); // by sequence
  private trajectoryLine: THREE.Line | null = null;
  private poseMarker: THREE.AxesHelper;
  private sparseObject: THREE.Points | null = null;
  private frusta = new THREE.Group();
  private centered = false;

  constructor(canvas: HTMLCanvasElement) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.renderer.setPixelRatio(window.devicePixelRatio ?? 1);
    this.scene = new THREE.Scene();
    this.scene.background = new THREE.Color(0x10141a);
    this.camera = new THREE.PerspectiveCamera(55, 1.0, 0.01, 2000);
    this.camera.position.set(4, -4, 6);
    this.camera.up.set(0, 0, 1);
    this.controls = new OrbitControls(this.camera, canvas);
    this.controls.enableDamping = true;

    this.scene.add(new THREE.GridHelper(20, 20, 0x2a3342, 0x1d2430).rotateX(Math.PI / 2));
    this.scene.add(new THREE.AxesHelper(1.0));
    this.poseMarker = new THREE.AxesHelper(0.5);
    this.poseMarker.visible = false;
    this.scene.add(this.poseMarker);
    this.scene.add(this.frusta);

    canvas.addEventListener("webglcontextlost", (event) => {
      event.preventDefault();
    });
    canvas.addEventListener("webglcontextrestored", () => {
      this.rebuildAll();
    });
  }

  resize(width: number, height: number): void {
    this.renderer.setSize(width, height, false);
    this.camera.aspect = width / Math.max(height, 1);
    this.camera.updateProjectionMatrix();
  }

  private makePoints(chunk: ChunkBuffer): THREE.Points {
    const geometry = new THREE.BufferGeometry();
    geometry.setAttribute("position", new THREE.BufferAttribute(chunk.positions, 3));
    geometry.setAttribute(
      "color",
      new THREE.BufferAttribute(chunk.colors, 3, true),
    );
    const material = new THREE.PointsMaterial({
      size: 0.012,
      vertexColors: true,
      sizeAttenuation: true,
    });
    return new THREE.Points(geometry, material);
  }

  /** Diff the state into the scene; cheap when nothing changed. */
  sync(state: ViewerState): void {
    const visible = new Set<number>();
    for (let i = state.drawFromChunk; i < state.chunks.length; i++) {
      const chunk = state.chunks[i];
      visible.add(chunk.sequence);
      if (!this.chunkObjects.has(chunk.sequence)) {
        const points = this.makePoints(chunk);
        this.chunkObjects.set(chunk.sequence, points);
        this.scene.add(points);
        if (!this.centered && chunk.count > 0) {
          this.lookAtChunk(chunk);
          this.centered = true;
        }
      }
    }
    for (const [sequence, object] of this.chunkObjects) {
      object.visible = visible.has(sequence);
    }

    if (state.latestPose) {
      const [x, y, z] = state.latestPose.center;
      this.poseMarker.position.set(x, y, z);
      const m = state.latestPose.rotation;
      const matrix = new THREE.Matrix4().set(
        m[0][0], m[0][1], m[0][2], 0,
        m[1][0], m[1][1], m[1][2], 0,
        m[2][0], m[2][1], m[2][2], 0,
        0, 0, 0, 1,
      );
      this.poseMarker.setRotationFromMatrix(matrix);
      this.poseMarker.visible = true;
    }
    this.syncTrajectory(state);
    this.syncSparse(state);
  }

  private lookAtChunk(chunk: ChunkBuffer): void {
    const x = chunk.positions[0];
    const y = chunk.positions[1];
    const z = chunk.positions[2];
    this.controls.target.set(x, y, z);
    this.camera.position.set(x + 3, y - 3, z + 4);
  }

  private syncTrajectory(state: ViewerState): void {
    if (state.trajectory.size < 2) return;
    const frames = [...state.trajectory.keys()].sort((a, b) => a - b);
    const positions = new Float32Array(frames.length * 3);
    frames.forEach((frameId, i) => {
      const center = state.trajectory.get(frameId)!;
      positions.set(center, i * 3);
    });
    if (this.trajectoryLine) {
      this.scene.remove(this.trajectoryLine);
      this.trajectoryLine.geometry.dispose();
    }
    const geometry = new THREE.BufferGeometry();
    geometry.setAttribute("position", new THREE.BufferAttribute(positions, 3));
    this.trajectoryLine = new THREE.Line(
      geometry,
      new THREE.LineBasicMaterial({ color: 0xffc857 }),
    );
    this.scene.add(this.trajectoryLine);

    // Small frustum gizmo at every tenth pose to keep the draw count low.
    this.frusta.clear();
    frames
      .filter((_, i) => i % 10 === 0)
      .forEach((frameId) => {
        const center = state.trajectory.get(frameId)!;
        const cone = new THREE.Mesh(
          new THREE.ConeGeometry(0.06, 0.18, 8),
          new THREE.MeshBasicMaterial({ color: 0x6aa6ff, wireframe: true }),
        );
        cone.position.set(center[0], center[1], center[2]);
        cone.rotateX(Math.PI / 2);
        this.frusta.add(cone);
      });
  }

  private syncSparse(state: ViewerState): void {
    if (!state.sparse || state.sparse.count === 0) return;
    if (this.sparseObject) {
      this.scene.remove(this.sparseObject);
      this.sparseObject.geometry.dispose();
    }
    const geometry = new THREE.BufferGeometry();
    geometry.setAttribute(
      "position",
      new THREE.BufferAttribute(state.sparse.positions, 3),
    );
    geometry.setAttribute(
      "color",
      new THREE.BufferAttribute(state.sparse.colors, 3, true),
    );
    this.sparseObject = new THREE.Points(
      geometry,
      new THREE.PointsMaterial({ size: 0.03, vertexColors: true }),
    );
    this.scene.add(this.sparseObject);
  }

  private rebuildAll(): void {
    for (const object of this.chunkObjects.values()) {
      this.scene.remove(object);
      object.geometry.dispose();
    }
    this.chunkObjects.clear();
    this.centered = false;
  }

  render(): void {
    this.controls.update();
    this.renderer.render(this.scene, this.camera);
  }
}
